import init, { two_piece, quadratic, train } from "./pkg/elle_web.js";

const $ = (id) => document.getElementById(id);
const nums = (s) => s.split(",").map(Number);

function show(el, f) {
  el.classList.remove("err");
  try {
    el.textContent = f();
  } catch (e) {
    el.classList.add("err");
    el.textContent = String(e.message ?? e);
  }
}

// Maps [lo, hi]² onto a square canvas.
function frame(canvas, lo, hi) {
  const s = canvas.width / (hi - lo);
  return ([x, y]) => [(x - lo) * s, canvas.height - (y - lo) * s];
}

function drawTwoPiece(r, x, eps) {
  const c = $("tp-canvas");
  const g = c.getContext("2d");
  const lo = Math.min(x[0], x[1]) - 1.5 * eps;
  const hi = Math.max(x[0], x[1]) + 1.5 * eps;
  const p = frame(c, lo, hi);
  g.clearRect(0, 0, c.width, c.height);
  // Pieces meet on the line 2x₀ = x₁.
  const step = (hi - lo) / 60;
  for (let u = lo; u < hi; u += step) {
    for (let v = lo; v < hi; v += step) {
      g.fillStyle = 2 * u - v >= 0 ? "#eef4ff" : "#fff4e8";
      const [a, b] = p([u, v + step]);
      g.fillRect(a, b, c.width / 60 + 1, c.height / 60 + 1);
    }
  }
  const worst = Math.max(...r.elle, 1e-12);
  r.xa.forEach((q, i) => {
    const [a, b] = p(q);
    g.fillStyle = `rgba(200, 0, 0, ${0.15 + 0.85 * r.elle[i] / worst})`;
    g.fillRect(a - 1.5, b - 1.5, 3, 3);
  });
  for (const [pt, col] of [[x, "#000"], [r.x_fgsm, "#080"]]) {
    const [a, b] = p(pt);
    g.fillStyle = col;
    g.beginPath();
    g.arc(a, b, 5, 0, 2 * Math.PI);
    g.fill();
  }
}

function runTwoPiece() {
  const x = [Number($("tp-x0").value), Number($("tp-x1").value)];
  const eps = Number($("tp-eps").value);
  show($("tp-out"), () => {
    const r = JSON.parse(two_piece(x[0], x[1], eps, Number($("tp-n").value), 0n));
    drawTwoPiece(r, x, eps);
    const max = (v) => Math.max(...v).toExponential(2);
    return `FGSM point (${r.x_fgsm.join(", ")})\n` +
      `max three-point residual ${max(r.elle)}\n` +
      `max two-sample residual  ${max(r.elle_2p)}`;
  });
}

function runQuadratic() {
  const alpha = Number($("q-alpha").value);
  $("q-alpha-v").textContent = alpha.toFixed(2);
  show($("q-out"), () => {
    const r = JSON.parse(quadratic(
      new Float64Array(nums($("q-a").value)),
      new Float64Array(nums($("q-xa").value)),
      new Float64Array(nums($("q-xb").value)),
      alpha,
    ));
    const f = (v) => v.toPrecision(8);
    return `three-point ${f(r.three_point)}   α(1-α)/2·D² ${f(r.three_point_predicted)}\n` +
      `five-point  ${f(r.five_point)}   D²/25       ${f(r.five_point_predicted)}`;
  });
}

function drawCurves(epochs) {
  const c = $("tr-curves");
  const g = c.getContext("2d");
  g.clearRect(0, 0, c.width, c.height);
  if (!epochs.length) return;
  const n = Math.max(epochs.length - 1, 1);
  const maxElin = Math.max(...epochs.map((e) => e.elin_probe), 1e-12);
  const series = [
    ["clean_acc", "#06c", 1],
    ["robust_acc", "#c30", 1],
    ["elin_probe", "#888", maxElin],
  ];
  for (const [key, col, top] of series) {
    g.strokeStyle = col;
    g.beginPath();
    epochs.forEach((e, i) => {
      const x = 10 + (i / n) * (c.width - 20);
      const y = c.height - 10 - (e[key] / top) * (c.height - 20);
      i ? g.lineTo(x, y) : g.moveTo(x, y);
    });
    g.stroke();
  }
  g.fillStyle = "#000";
  g.fillText("clean (blue), robust (red), E_lin probe scaled (grey)", 12, 14);
}

function drawPoints(r) {
  const c = $("tr-points");
  const g = c.getContext("2d");
  const p = frame(c, 0, 1);
  g.clearRect(0, 0, c.width, c.height);
  r.points.forEach((q, i) => {
    const [a, b] = p(q);
    g.fillStyle = r.labels[i] === 0 ? "#06c" : "#c30";
    g.fillRect(a - 2, b - 2, 4, 4);
    if (r.predicted.length && r.predicted[i] !== r.labels[i]) {
      g.strokeStyle = "#000";
      g.strokeRect(a - 4, b - 4, 8, 8);
    }
  });
}

function runTrain() {
  const btn = $("tr-run");
  btn.disabled = true;
  // Let the button repaint before the blocking call.
  setTimeout(() => {
    show($("tr-out"), () => {
      const r = JSON.parse(train($("tr-config").value));
      drawCurves(r.epochs);
      drawPoints(r);
      if (r.diverged) return `diverged: ${r.diverged}`;
      const last = r.epochs[r.epochs.length - 1];
      return `final clean ${last.clean_acc.toFixed(3)}, robust ${last.robust_acc.toFixed(3)}\n` +
        `catastrophic overfitting ${r.co_epoch == null ? "not detected" : "at epoch " + r.co_epoch}`;
    });
    btn.disabled = false;
  }, 10);
}

await init();
$("tr-config").value = await (await fetch("default.toml")).text();
$("tp-run").onclick = runTwoPiece;
for (const id of ["q-a", "q-xa", "q-xb", "q-alpha"]) $(id).oninput = runQuadratic;
$("tr-run").onclick = runTrain;
runTwoPiece();
runQuadratic();
