import init, { resampler_response, analyze_tone, layer_weights } from "../pkg/svs_demo.js";

const $ = (id) => document.getElementById(id);

function axes(ctx, w, h) {
  ctx.clearRect(0, 0, w, h);
  ctx.strokeStyle = "#999";
  ctx.strokeRect(0.5, 0.5, w - 1, h - 1);
}

function plotResponse() {
  const src = Number($("src").value);
  const dst = Number($("dst").value);
  const nyq = src / 2;
  const freqs = [];
  for (let i = 1; i <= 120; i++) freqs.push((nyq * i) / 121);
  let gains;
  try {
    gains = resampler_response(src, dst, Float64Array.from(freqs));
  } catch (e) {
    $("resample-note").innerHTML = `<span class="err">${e.message ?? e}</span>`;
    return;
  }
  const c = $("resample-plot");
  const ctx = c.getContext("2d");
  axes(ctx, c.width, c.height);
  const floor = -80;
  const y = (db) => (Math.max(db, floor) / floor) * (c.height - 10) + 5;
  ctx.strokeStyle = "#ccc";
  for (const db of [-20, -40, -60]) {
    ctx.beginPath();
    ctx.moveTo(0, y(db));
    ctx.lineTo(c.width, y(db));
    ctx.stroke();
  }
  ctx.strokeStyle = "#4a7fb5";
  ctx.beginPath();
  gains.forEach((g, i) => {
    const x = (freqs[i] / nyq) * c.width;
    if (i === 0) ctx.moveTo(x, y(g));
    else ctx.lineTo(x, y(g));
  });
  ctx.stroke();
  const cutoff = Math.min(src, dst) / 2;
  ctx.strokeStyle = "#b00";
  ctx.beginPath();
  ctx.moveTo((cutoff / nyq) * c.width, 0);
  ctx.lineTo((cutoff / nyq) * c.width, c.height);
  ctx.stroke();
  const stop = gains.filter((g, i) => freqs[i] > cutoff * 1.1);
  $("resample-note").textContent =
    `0 to ${nyq} Hz; grid lines every 20 dB; red line at ${cutoff} Hz.` +
    (stop.length ? ` Highest stopband gain ${Math.max(...stop).toFixed(1)} dB.` : "");
}

function plotTone() {
  let a;
  try {
    a = analyze_tone(Number($("freq").value), Number($("secs").value), Number($("amp").value));
  } catch (e) {
    $("tone-note").innerHTML = `<span class="err">${e.message ?? e}</span>`;
    return;
  }
  const { n_frames: n, n_mels: m } = a;
  const mel = a.mel;
  const f0 = a.f0_hz;
  a.free();

  const c = $("mel-plot");
  const ctx = c.getContext("2d");
  axes(ctx, c.width, c.height);
  let lo = Infinity, hi = -Infinity;
  for (const v of mel) { lo = Math.min(lo, v); hi = Math.max(hi, v); }
  const cw = c.width / n, ch = c.height / m;
  for (let t = 0; t < n; t++) {
    for (let k = 0; k < m; k++) {
      const v = (mel[t * m + k] - lo) / Math.max(hi - lo, 1e-9);
      const s = Math.round(255 * v);
      ctx.fillStyle = `rgb(${s},${Math.round(s * 0.6)},${255 - s})`;
      ctx.fillRect(t * cw, c.height - (k + 1) * ch, Math.ceil(cw), Math.ceil(ch));
    }
  }

  const p = $("f0-plot");
  const pctx = p.getContext("2d");
  axes(pctx, p.width, p.height);
  const top = Math.max(...f0, 1) * 1.2;
  pctx.fillStyle = "#4a7fb5";
  f0.forEach((f, t) => {
    if (f > 0) pctx.fillRect((t / n) * p.width, p.height - (f / top) * p.height, 3, 3);
  });
  const voiced = f0.filter((f) => f > 0);
  const mean = voiced.reduce((s, f) => s + f, 0) / Math.max(voiced.length, 1);
  $("tone-note").textContent =
    `${n} frames x ${m} mel bands (log range ${lo.toFixed(1)} to ${hi.toFixed(1)}); ` +
    `${voiced.length} voiced frames, mean F0 ${mean.toFixed(2)} Hz.`;
}

function logitInputs() {
  return [...$("logits").querySelectorAll("input")];
}

function addLogit(value) {
  const input = document.createElement("input");
  input.type = "number";
  input.step = "0.5";
  input.value = value;
  input.addEventListener("input", showWeights);
  $("logits").appendChild(input);
}

function showWeights() {
  const logits = Float64Array.from(logitInputs().map((i) => Number(i.value) || 0));
  const w = layer_weights(logits);
  $("weights").innerHTML = "";
  w.forEach((v, i) => {
    const bar = document.createElement("div");
    bar.className = "bar";
    bar.style.width = `${Math.max(v * 100, 0.5)}%`;
    bar.textContent = `layer ${i}: ${v.toFixed(4)}`;
    $("weights").appendChild(bar);
  });
}

async function main() {
  await init();
  $("status").textContent = "Ready.";
  $("run-resample").addEventListener("click", plotResponse);
  $("run-tone").addEventListener("click", plotTone);
  $("add-layer").addEventListener("click", () => { addLogit(0); showWeights(); });
  $("remove-layer").addEventListener("click", () => {
    const inputs = logitInputs();
    if (inputs.length > 1) inputs[inputs.length - 1].remove();
    showWeights();
  });
  [0, 0, 0, 0].forEach(addLogit);
  showWeights();
  plotResponse();
  plotTone();
}

main().catch((e) => { $("status").innerHTML = `<span class="err">${e}</span>`; });
