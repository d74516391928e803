// Plain ES module; expects the wasm-bindgen output in ./pkg/ (see README).
import init, { Demo } from "./pkg/vqff_wasm.js";

const $ = (id) => document.getElementById(id);
const status = $("status");

let demo = null;
let lastQuery = null;

function draw(canvasId, rgba, side) {
  const canvas = $(canvasId);
  canvas.width = side;
  canvas.height = side;
  const ctx = canvas.getContext("2d");
  ctx.putImageData(new ImageData(new Uint8ClampedArray(rgba), side, side), 0, 0);
}

function report(err) {
  status.textContent = err ? String(err) : "";
}

function generate() {
  try {
    report(null);
    demo = new Demo(
      Number($("seed").value) >>> 0,
      Number($("regions").value),
      Number($("noise").value)
    );
    const side = demo.width();
    draw("rgb", demo.rgb(), side);
    draw("pca", demo.pca(), side);
    for (const id of ["seg", "recon", "heat"]) {
      const c = $(id);
      c.getContext("2d").clearRect(0, 0, c.width, c.height);
    }
    $("stats").textContent = "";
    $("query-info").textContent = "";
    lastQuery = null;
  } catch (e) {
    report(e);
  }
}

function segment() {
  if (!demo) return;
  try {
    report(null);
    const overlay = demo.segment(
      Number($("superpixels").value),
      Number($("compactness").value)
    );
    draw("seg", overlay, demo.width());
    $("stats").textContent = "(field not built yet)";
  } catch (e) {
    report(e);
  }
}

function build() {
  if (!demo) return;
  try {
    report(null);
    const summary = JSON.parse(demo.build(Number($("alpha").value) / 100));
    draw("recon", demo.reconstruction(), demo.width());
    $("stats").textContent =
      `segments: ${summary.segments}   K: ${summary.k}\n` +
      `bits/dim: ${summary.bits_per_dim.toFixed(3)}   ` +
      `compression: ${summary.compression_ratio.toFixed(1)}x   ` +
      `fidelity: ${summary.fidelity.toFixed(4)}`;
    if (lastQuery) query(lastQuery.x, lastQuery.y);
  } catch (e) {
    report(e);
  }
}

function query(x, y) {
  if (!demo) return;
  try {
    report(null);
    const tau = Number($("tau").value) / 100;
    const heat = demo.query_at(x, y, tau);
    draw("heat", heat, demo.width());
    const frac = demo.mask_fraction(x, y, tau);
    $("query-info").textContent =
      `query at (${x}, ${y}), τ=${tau.toFixed(2)}: mask covers ${(frac * 100).toFixed(1)}% of the view`;
    lastQuery = { x, y };
  } catch (e) {
    report(e);
  }
}

function clickToQuery(canvasId) {
  $(canvasId).addEventListener("click", (ev) => {
    if (!demo) return;
    const rect = ev.target.getBoundingClientRect();
    const x = Math.floor(((ev.clientX - rect.left) / rect.width) * demo.width());
    const y = Math.floor(((ev.clientY - rect.top) / rect.height) * demo.height());
    query(x, y);
  });
}

function bindSlider(id, target, scale) {
  $(id).addEventListener("input", () => {
    $(target).textContent = scale
      ? (Number($(id).value) * scale).toFixed(2)
      : $(id).value;
  });
}

async function main() {
  await init();
  bindSlider("regions", "regions-val");
  bindSlider("noise", "noise-val", 0.01);
  bindSlider("superpixels", "superpixels-val");
  bindSlider("compactness", "compactness-val");
  bindSlider("alpha", "alpha-val", 0.01);
  bindSlider("tau", "tau-val", 0.01);
  $("tau").addEventListener("change", () => {
    if (lastQuery) query(lastQuery.x, lastQuery.y);
  });
  $("generate").addEventListener("click", generate);
  $("segment").addEventListener("click", segment);
  $("build").addEventListener("click", build);
  for (const id of ["rgb", "pca", "seg", "recon", "heat"]) clickToQuery(id);
  generate();
}

main().catch(report);
