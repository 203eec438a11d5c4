// Build the bindings first:
//   cargo build -p conceptmix-wasm --release --target wasm32-unknown-unknown
//   wasm-bindgen --target web --out-dir crates/wasm/www/pkg \
//     target/wasm32-unknown-unknown/release/conceptmix_wasm.wasm
import init, { caption_count, mix_sources, alpha_bars, shape_rgba, shape_caption } from "./pkg/conceptmix_wasm.js";

const $ = (id) => document.getElementById(id);
const num = (id) => Number($(id).value);
const palette = ["#e6194b", "#3cb44b", "#4363d8", "#f58231", "#911eb4", "#42d4f4", "#f032e6", "#bfef45", "#fabed4", "#469990"];

function guard(errId, fn) {
  try {
    fn();
    $(errId).textContent = "";
  } catch (e) {
    $(errId).textContent = e.message ?? String(e);
  }
}

function drawMix() {
  guard("mixerr", () => {
    const [m, d] = [num("m"), num("d")];
    const text = $("captions").value;
    const sources = mix_sources(text, m, d, num("coarse"), num("fine"), num("mixseed"));
    const cell = Math.max(4, Math.floor(480 / d));
    const canvas = $("heatmap");
    canvas.width = d * cell;
    canvas.height = m * cell;
    const ctx = canvas.getContext("2d");
    sources.forEach((k, i) => {
      ctx.fillStyle = palette[k % palette.length];
      ctx.fillRect((i % d) * cell, Math.floor(i / d) * cell, cell, cell);
    });
    const counts = new Array(caption_count(text)).fill(0);
    sources.forEach((k) => counts[k]++);
    $("legend").innerHTML = counts
      .map((c, k) => `<span><i style="background:${palette[k % palette.length]}"></i>caption ${k + 1}: ${c} cells</span>`)
      .join("");
  });
}

function drawSchedule() {
  guard("scheduleerr", () => {
    const steps = num("steps");
    const [b0, b1] = [num("b0"), num("b1")];
    $("t").max = steps;
    const t = Math.min(num("t"), steps);
    const bars = alpha_bars(steps, b0, b1);
    $("tval").textContent = t === 0 ? "t = 0 (clean)" : `t = ${t}, ᾱ = ${bars[t - 1].toFixed(4)}`;

    const canvas = $("curve");
    const ctx = canvas.getContext("2d");
    const [w, h] = [canvas.width, canvas.height];
    ctx.clearRect(0, 0, w, h);
    ctx.strokeStyle = "#4363d8";
    ctx.beginPath();
    bars.forEach((a, i) => {
      const x = (i / Math.max(1, steps - 1)) * (w - 1);
      const y = (1 - a) * (h - 1);
      i === 0 ? ctx.moveTo(x, y) : ctx.lineTo(x, y);
    });
    ctx.stroke();
    if (t > 0) {
      const x = ((t - 1) / Math.max(1, steps - 1)) * (w - 1);
      ctx.strokeStyle = "#e6194b";
      ctx.beginPath();
      ctx.moveTo(x, 0);
      ctx.lineTo(x, h);
      ctx.stroke();
    }

    const size = 32;
    const rgba = shape_rgba("circle", size, 7, t, steps, b0, b1);
    const img = new ImageData(new Uint8ClampedArray(rgba), size, size);
    $("noised").getContext("2d").putImageData(img, 0, 0);
  });
}

let shapeSeed = 0;
function drawShapes() {
  guard("shapeserr", () => {
    const [cls, size] = [$("class").value, num("size")];
    const gallery = $("gallery");
    gallery.innerHTML = "";
    for (let i = 0; i < 6; i++) {
      const seed = shapeSeed + i;
      const canvas = document.createElement("canvas");
      canvas.width = size;
      canvas.height = size;
      canvas.style.width = "128px";
      canvas.style.height = "128px";
      const rgba = shape_rgba(cls, size, seed, 0, 1, 0.0001, 0.0001);
      canvas.getContext("2d").putImageData(new ImageData(new Uint8ClampedArray(rgba), size, size), 0, 0);
      const box = document.createElement("div");
      box.className = "shape";
      box.append(canvas, document.createElement("br"), shape_caption(cls, size, seed));
      gallery.append(box);
    }
  });
}

await init();
for (const id of ["captions", "m", "d", "coarse", "fine", "mixseed"]) $(id).addEventListener("input", drawMix);
$("reseed").addEventListener("click", () => {
  $("mixseed").value = Math.floor(Math.random() * 1e6);
  drawMix();
});
for (const id of ["steps", "b0", "b1", "t"]) $(id).addEventListener("input", drawSchedule);
for (const id of ["class", "size"]) $(id).addEventListener("input", drawShapes);
$("more").addEventListener("click", () => {
  shapeSeed += 6;
  drawShapes();
});
drawMix();
drawSchedule();
drawShapes();
