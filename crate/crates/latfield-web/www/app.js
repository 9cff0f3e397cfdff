import init, { modelReport, greenTable, vacancySolve } from "./pkg/latfield_web.js";

const $ = (id) => document.getElementById(id);

// Runs a wasm call after the status text has painted, reporting errors inline.
function run(status, work) {
  status.classList.remove("error");
  status.textContent = "computing...";
  setTimeout(() => {
    const t = performance.now();
    try {
      const note = work();
      status.textContent = `${note} (${((performance.now() - t) / 1000).toFixed(2)} s)`;
    } catch (e) {
      status.classList.add("error");
      status.textContent = String(e.message ?? e);
    }
  }, 20);
}

function fitView(canvas, xs, ys, pad = 20) {
  const [x0, x1] = [Math.min(...xs), Math.max(...xs)];
  const [y0, y1] = [Math.min(...ys), Math.max(...ys)];
  const s = Math.min((canvas.width - 2 * pad) / (x1 - x0 || 1), (canvas.height - 2 * pad) / (y1 - y0 || 1));
  return {
    scale: s,
    px: (x) => pad + (x - x0) * s,
    py: (y) => canvas.height - pad - (y - y0) * s,
  };
}

function colour(t) {
  // t in [0, 1] to a blue-to-yellow ramp
  const r = Math.round(255 * Math.min(1, 2 * t));
  const g = Math.round(255 * t);
  const b = Math.round(255 * (1 - t));
  return `rgb(${r},${g},${b})`;
}

function drawGreen(data) {
  const c = $("green-canvas");
  const ctx = c.getContext("2d");
  ctx.clearRect(0, 0, c.width, c.height);
  const pts = data.points;
  const v = fitView(c, pts.map((p) => p[2]), pts.map((p) => p[3]));
  const vals = pts.map((p) => p[4]);
  const [lo, hi] = [Math.min(...vals), Math.max(...vals)];
  const size = Math.max(2, v.scale * 0.9);
  for (const p of pts) {
    ctx.fillStyle = colour((p[4] - lo) / (hi - lo || 1));
    ctx.fillRect(v.px(p[2]) - size / 2, v.py(p[3]) - size / 2, size, size);
  }
}

function drawSolve(data, arrowScale) {
  const c = $("solve-canvas");
  const ctx = c.getContext("2d");
  ctx.clearRect(0, 0, c.width, c.height);
  const v = fitView(c, data.sites.map((s) => s[0]), data.sites.map((s) => s[1]));
  ctx.strokeStyle = "#1f4e99";
  ctx.fillStyle = "#999";
  for (const [x, y, u1, u2] of data.sites) {
    const [a, b] = [v.px(x), v.py(y)];
    ctx.fillRect(a - 1, b - 1, 2, 2);
    ctx.beginPath();
    ctx.moveTo(a, b);
    ctx.lineTo(a + arrowScale * u1 * v.scale, b - arrowScale * u2 * v.scale);
    ctx.stroke();
  }
}

await init();

$("model-run").onclick = () => {
  const out = $("model-out");
  run(out, () => {
    const r = JSON.parse(modelReport($("model-name").value));
    const { elastic, ...rest } = r;
    return JSON.stringify(rest, null, 2);
  });
};

$("green-run").onclick = () =>
  run($("green-info"), () => {
    const r = JSON.parse(greenTable($("green-name").value, Number($("green-l").value), Number($("green-r").value)));
    drawGreen(r);
    const e1 = r.points.find((p) => p[0] === 1 && p[1] === 0);
    return `G(e1) - G(0) = ${e1[4].toPrecision(12)}, extrapolation error ${r.extrapolation_error.toExponential(2)}`;
  });

$("solve-run").onclick = () =>
  run($("solve-info"), () => {
    const aug = $("solve-scheme").value === "augmented";
    const r = JSON.parse(vacancySolve(aug, Number($("solve-r").value)));
    drawSolve(r, Number($("solve-scale").value));
    return `${r.scheme}, ${r.sites.length} sites, energy ${r.report.energy.toPrecision(10)}, |grad| ${r.report.gradient_norm.toExponential(2)}`;
  });
