import init, { boundCurve, summarizeJoint, trainSynthetic } from "./pkg/tokenmi_wasm_demo.js";

const $ = (id) => document.getElementById(id);
const fmt = (x) => (Number.isFinite(x) ? x.toFixed(6) : String(x));

function plot(canvas, series, { xLabel, yLabel, xMax = 1 }) {
  const ctx = canvas.getContext("2d");
  const { width: w, height: h } = canvas;
  const pad = { l: 56, r: 12, t: 12, b: 32 };
  ctx.clearRect(0, 0, w, h);
  const ys = series.flat().filter(Number.isFinite);
  let lo = Math.min(0, ...ys), hi = Math.max(0, ...ys);
  if (hi === lo) hi = lo + 1;
  const X = (x) => pad.l + (x / xMax) * (w - pad.l - pad.r);
  const Y = (y) => h - pad.b - ((y - lo) / (hi - lo)) * (h - pad.t - pad.b);

  ctx.strokeStyle = "#c9ced8";
  ctx.fillStyle = "#5b6475";
  ctx.font = "12px system-ui";
  ctx.beginPath();
  ctx.moveTo(pad.l, Y(0)); ctx.lineTo(w - pad.r, Y(0));
  ctx.moveTo(pad.l, pad.t); ctx.lineTo(pad.l, h - pad.b);
  ctx.stroke();
  ctx.fillText(hi.toPrecision(3), 4, Y(hi) + 4);
  ctx.fillText(lo.toPrecision(3), 4, Y(lo));
  ctx.fillText(xLabel, w / 2, h - 8);
  ctx.save(); ctx.translate(14, h / 2); ctx.rotate(-Math.PI / 2); ctx.fillText(yLabel, 0, 0); ctx.restore();

  const colors = ["#2458b3", "#c2410c"];
  series.forEach((ys, k) => {
    ctx.strokeStyle = colors[k % colors.length];
    ctx.lineWidth = 2;
    ctx.beginPath();
    ys.forEach((y, i) => {
      const x = (i / Math.max(1, ys.length - 1)) * xMax;
      i === 0 ? ctx.moveTo(X(x), Y(y)) : ctx.lineTo(X(x), Y(y));
    });
    ctx.stroke();
  });
  return { X, Y, pad };
}

function setList(dl, entries) {
  dl.innerHTML = "";
  for (const [k, v] of entries) {
    const dt = document.createElement("dt");
    dt.textContent = k;
    const dd = document.createElement("dd");
    dd.textContent = v;
    dl.append(dt, dd);
  }
}

function showError(dl, e) {
  dl.innerHTML = "";
  const dd = document.createElement("dd");
  dd.className = "err";
  dd.textContent = String(e.message ?? e);
  dl.append(dd);
}

// Bound curve

const POINTS = 201;
let curve = [];

function drawCurve() {
  const v = Math.max(2, parseInt($("curve-vocab").value, 10) || 2);
  try {
    curve = Array.from(boundCurve(v, $("curve-bits").checked, $("curve-exact").checked, POINTS));
    plot($("curve-canvas"), [curve], { xLabel: "p_rec", yLabel: $("curve-bits").checked ? "bits" : "nats" });
  } catch (e) {
    $("curve-readout").textContent = String(e.message ?? e);
  }
}

$("curve-canvas").addEventListener("mousemove", (ev) => {
  const c = $("curve-canvas");
  const r = c.getBoundingClientRect();
  const x = ((ev.clientX - r.left) * (c.width / r.width) - 56) / (c.width - 68);
  if (x < 0 || x > 1 || !curve.length) return;
  const i = Math.round(x * (POINTS - 1));
  const p = i / (POINTS - 1);
  $("curve-readout").textContent = `p_rec = ${p.toFixed(3)}  →  I(t;E) ≥ ${fmt(curve[i])}` + (curve[i] < 0 ? "  (vacuous)" : "");
});
for (const id of ["curve-vocab", "curve-bits", "curve-exact"]) $(id).addEventListener("input", drawCurve);

// Joint explorer

let weights = [[0.4, 0.1], [0.1, 0.4]];

function resize() {
  const v = Math.min(6, Math.max(2, parseInt($("joint-v").value, 10) || 2));
  const o = Math.min(6, Math.max(2, parseInt($("joint-o").value, 10) || 2));
  weights = Array.from({ length: v }, (_, t) => Array.from({ length: o }, (_, e) => weights[t]?.[e] ?? (t === e ? 1 : 0.2)));
  renderGrid();
}

function renderGrid() {
  const grid = $("joint-grid");
  grid.innerHTML = "";
  const head = grid.insertRow();
  head.insertCell().outerHTML = "<th></th>";
  weights[0].forEach((_, e) => { head.insertCell().outerHTML = `<th>e=${e}</th>`; });
  weights.forEach((row, t) => {
    const tr = grid.insertRow();
    tr.insertCell().outerHTML = `<th>t=${t}</th>`;
    row.forEach((w, e) => {
      const input = document.createElement("input");
      input.type = "number"; input.min = "0"; input.step = "0.05"; input.value = String(+w.toFixed(4));
      input.addEventListener("input", () => { weights[t][e] = Math.max(0, parseFloat(input.value) || 0); summarize(); });
      tr.insertCell().append(input);
    });
  });
  summarize();
}

function summarize() {
  const total = weights.flat().reduce((a, b) => a + b, 0);
  if (total <= 0) return showError($("joint-out"), "table is all zeros");
  const rows = weights.map((r) => r.map((w) => w / total));
  try {
    const s = JSON.parse(summarizeJoint(JSON.stringify(rows)));
    setList($("joint-out"), [
      ["I(t;E)", `${fmt(s.mi)} nats`],
      ["H(t)", fmt(s.token_entropy)],
      ["H(t|E)", fmt(s.conditional_entropy)],
      ["MAP accuracy", `${fmt(s.map_accuracy)}  (decoder e→t: ${s.decoder.join(", ")})`],
      ["bound at MAP accuracy", fmt(s.fano_bound)],
      ["slack I − bound", fmt(s.slack) + (s.uniform_tokens ? "" : "  (token marginal not uniform: bound not guaranteed)")],
    ]);
  } catch (e) {
    showError($("joint-out"), e);
  }
}

$("joint-v").addEventListener("change", resize);
$("joint-o").addEventListener("change", resize);
$("joint-uniform").addEventListener("click", () => {
  // each row sums to 1, so every token gets mass 1/|V| after normalization
  weights = weights.map((r) => {
    const s = r.reduce((a, b) => a + b, 0);
    return s > 0 ? r.map((w) => w / s) : r.map(() => 1 / r.length);
  });
  renderGrid();
});
$("joint-random").addEventListener("click", () => {
  weights = weights.map((r) => r.map(() => -Math.log(Math.random() || 1e-12)));
  renderGrid();
});

// Training

$("train-noise").addEventListener("input", () => { $("train-noise-val").textContent = (+$("train-noise").value).toFixed(2); });
$("train-run").addEventListener("click", () => {
  const btn = $("train-run");
  btn.disabled = true;
  setList($("train-out"), [["status", "training…"]]);
  // yield so the status paints before the synchronous run
  setTimeout(() => {
    try {
      const s = JSON.parse(trainSynthetic(
        parseInt($("train-vocab").value, 10), parseInt($("train-sent").value, 10),
        parseFloat($("train-noise").value), parseInt($("train-epochs").value, 10), 0));
      plot($("train-canvas"), [s.epoch_losses], { xLabel: "epoch", yLabel: "mean batch loss" });
      setList($("train-out"), [
        ["held-out p_rec", fmt(s.p_rec)],
        ["token F1", fmt(s.token_f1)],
        ["BLEU-4", fmt(s.bleu_4)],
        ["ROUGE-L", fmt(s.rouge_l)],
        ["token MI bound", `${fmt(s.token_bound)} nats`],
      ]);
    } catch (e) {
      showError($("train-out"), e);
    } finally {
      btn.disabled = false;
    }
  }, 20);
});

await init();
drawCurve();
renderGrid();
