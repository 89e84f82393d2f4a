import init, { Demo } from "./pkg/sst_web.js";

const $ = (id) => document.getElementById(id);
const status = (msg, error = false) => {
  $("status").textContent = msg;
  $("status").className = error ? "error" : "";
};

await init();
const demo = new Demo(0);
const size = demo.size;
for (const c of document.querySelectorAll("canvas")) {
  c.width = size;
  c.height = size;
}

// Slider is log10(eta); the leftmost position means eta = 0.
const eta = () => {
  const v = Number($("eta").value);
  return v <= -1 ? 0 : 10 ** v;
};

function draw(id, rgba) {
  const ctx = $(id).getContext("2d");
  ctx.putImageData(new ImageData(new Uint8ClampedArray(rgba), size, size), 0, 0);
}

let sampled = false;

function segment() {
  $("eta-value").textContent = eta().toPrecision(3);
  if (!sampled) return;
  try {
    const s = demo.segment(eta());
    draw("c-support", s.support);
    draw("c-query", s.query);
    draw("c-truth", s.truth);
    draw("c-before", s.before);
    draw("c-after", s.after);
    draw("c-gradient", s.gradient);
    $("cap-before").textContent = `before tuning, IoU ${s.iouBefore.toFixed(3)}`;
    $("cap-after").textContent = `after tuning, IoU ${s.iouAfter.toFixed(3)}`;
    status(`self-segmentation loss ${s.selfLossBefore.toFixed(4)} -> ${s.selfLossAfter.toFixed(4)}; ${demo.trainSteps} training steps so far`);
  } catch (e) {
    status(String(e), true);
  }
}

function setFold() {
  try {
    const split = JSON.parse(demo.setFold(Number($("fold").value), Number($("stride").value)));
    $("split").textContent = `test classes:  ${split.test_classes.join(" ")}\ntrain classes: ${split.train_classes.join(" ")}`;
    sample();
  } catch (e) {
    status(String(e), true);
  }
}

function sample() {
  try {
    const test = document.querySelector("input[name=mode]:checked").value === "test";
    const cls = demo.sample(test, Number($("seed").value));
    sampled = true;
    segment();
    status(`class ${cls}. ` + $("status").textContent);
  } catch (e) {
    status(String(e), true);
  }
}

async function train() {
  const button = $("train");
  button.disabled = true;
  try {
    for (let i = 0; i < 20; i++) {
      const loss = demo.train(1, Number($("lr").value));
      status(`step ${demo.trainSteps}: loss ${loss.toFixed(4)}`);
      await new Promise((r) => setTimeout(r, 0));
    }
    segment();
  } catch (e) {
    status(String(e), true);
  } finally {
    button.disabled = false;
  }
}

async function loadCheckpoint(ev) {
  const file = ev.target.files[0];
  if (!file) return;
  try {
    demo.loadCheckpoint(new Uint8Array(await file.arrayBuffer()));
    segment();
    status(`loaded ${file.name}. ` + $("status").textContent);
  } catch (e) {
    status(String(e), true);
  }
}

$("fold").addEventListener("change", setFold);
$("stride").addEventListener("change", setFold);
$("sample").addEventListener("click", sample);
$("next").addEventListener("click", () => {
  $("seed").value = Number($("seed").value) + 1;
  sample();
});
for (const r of document.querySelectorAll("input[name=mode]")) r.addEventListener("change", sample);
$("eta").addEventListener("input", segment);
$("train").addEventListener("click", train);
$("ckpt").addEventListener("change", loadCheckpoint);
setFold();
