import init, { poolCloud, flowField, MicroTrainer } from "./pkg/gafield_demo.js";

const $ = (id) => document.getElementById(id);

// Orthographic view with yaw and pitch, shared by all canvases.
function makeView(canvas, draw) {
  const view = { yaw: 0.6, pitch: 0.35, draw };
  let drag = null;
  canvas.addEventListener("pointerdown", (e) => { drag = [e.clientX, e.clientY]; canvas.setPointerCapture(e.pointerId); });
  canvas.addEventListener("pointerup", () => { drag = null; });
  canvas.addEventListener("pointermove", (e) => {
    if (!drag) return;
    view.yaw += (e.clientX - drag[0]) * 0.01;
    view.pitch = Math.max(-1.5, Math.min(1.5, view.pitch + (e.clientY - drag[1]) * 0.01));
    drag = [e.clientX, e.clientY];
    view.draw();
  });
  return view;
}

function project(view, p) {
  const cy = Math.cos(view.yaw), sy = Math.sin(view.yaw);
  const cp = Math.cos(view.pitch), sp = Math.sin(view.pitch);
  const x = cy * p[0] - sy * p[1];
  const y0 = sy * p[0] + cy * p[1];
  const y = cp * p[2] - sp * y0;
  const depth = sp * p[2] + cp * y0;
  return [x, y, depth];
}

function drawCloud(ctx, view, points, colour, box) {
  const [ox, oy, w, h] = box;
  const scale = Math.min(w, h) * 0.3;
  const order = points.map((p, i) => [project(view, p), i]).sort((a, b) => b[0][2] - a[0][2]);
  for (const [[x, y], i] of order) {
    ctx.fillStyle = colour(i);
    ctx.fillRect(ox + w / 2 + x * scale - 2, oy + h / 2 - y * scale - 2, 4, 4);
  }
  return scale;
}

// Diverging map on [-1.25, 1]: blue, white, red.
function cpColour(v) {
  const t = Math.max(-1, Math.min(1, v >= 0 ? v : v / 1.25));
  const a = Math.round(255 * (1 - Math.abs(t)));
  return t >= 0 ? `rgb(255,${a},${a})` : `rgb(${a},${a},255)`;
}

function hashColour(k) {
  const h = (k * 137.508) % 360;
  return `hsl(${h},65%,55%)`;
}

function bindLabel(id, fmt = (v) => v) {
  const el = $(id), out = $(id + "-v");
  const show = () => { out.textContent = fmt(el.value); };
  el.addEventListener("input", show);
  show();
  return el;
}

function setupPooling() {
  const canvas = $("pool-canvas"), ctx = canvas.getContext("2d");
  const grid = bindLabel("pool-grid"), aspect = bindLabel("pool-aspect"), points = bindLabel("pool-points");
  let data = null;
  const view = makeView(canvas, () => {
    ctx.clearRect(0, 0, canvas.width, canvas.height);
    if (!data) return;
    const box = [0, 0, canvas.width, canvas.height];
    const scale = drawCloud(ctx, view, data.points, (i) => hashColour(data.cluster[i]), box);
    ctx.fillStyle = "#000";
    for (const c of data.centroids) {
      const [x, y] = project(view, c);
      ctx.fillRect(canvas.width / 2 + x * scale - 1.5, canvas.height / 2 - y * scale - 1.5, 3, 3);
    }
  });
  const update = () => {
    try {
      data = JSON.parse(poolCloud(+aspect.value, +grid.value, +points.value));
      $("pool-stats").textContent =
        `${data.points.length} points → ${data.centroids.length} cells, at most ${data.max_members} per cell`;
    } catch (e) {
      $("pool-stats").textContent = String(e);
    }
    view.draw();
  };
  [grid, aspect, points].forEach((el) => el.addEventListener("input", update));
  update();
}

function setupFlow() {
  const canvas = $("flow-canvas"), ctx = canvas.getContext("2d");
  const yaw = bindLabel("flow-yaw", (v) => `${v}°`), aspect = bindLabel("flow-aspect"), speed = bindLabel("flow-speed");
  let data = null;
  const view = makeView(canvas, () => {
    ctx.clearRect(0, 0, canvas.width, canvas.height);
    if (!data) return;
    const scale = drawCloud(ctx, view, data.points, (i) => cpColour(data.cp[i]), [0, 0, canvas.width, canvas.height]);
    const tail = project(view, data.inflow.map((d) => -2.2 * d));
    const head = project(view, data.inflow.map((d) => -1.5 * d));
    const px = (p) => [canvas.width / 2 + p[0] * scale, canvas.height / 2 - p[1] * scale];
    ctx.strokeStyle = "#333";
    ctx.lineWidth = 2;
    ctx.beginPath();
    ctx.moveTo(...px(tail));
    ctx.lineTo(...px(head));
    ctx.stroke();
    ctx.beginPath();
    ctx.arc(...px(head), 4, 0, 2 * Math.PI);
    ctx.fillStyle = "#333";
    ctx.fill();
  });
  const update = () => {
    try {
      data = JSON.parse(flowField(+aspect.value, +yaw.value, +speed.value, 3000, 7));
      const fmt = (v) => v.toFixed(2);
      const rows = data.parts.map((r) => `<tr><td>${r.part}</td><td>${fmt(r.pressure)}</td><td>${fmt(r.shear)}</td><td>${fmt(r.area)}</td></tr>`);
      $("flow-table").innerHTML =
        "<tr><th>part</th><th>pressure N</th><th>shear N</th><th>area m²</th></tr>" + rows.join("") +
        `<tr><th>total</th><th>${fmt(data.total_pressure)}</th><th>${fmt(data.total_shear)}</th><th></th></tr>` +
        `<tr><td>C<sub>D</sub></td><td colspan="3">${data.cd.toFixed(4)}</td></tr>`;
    } catch (e) {
      $("flow-table").textContent = String(e);
    }
    view.draw();
  };
  [yaw, aspect, speed].forEach((el) => el.addEventListener("input", update));
  update();
}

function setupTraining() {
  const canvas = $("train-canvas"), ctx = canvas.getContext("2d");
  const curve = $("train-curve"), cctx = curve.getContext("2d");
  let trainer = null, state = null, history = [], running = false;
  const view = makeView(canvas, () => {
    ctx.clearRect(0, 0, canvas.width, canvas.height);
    if (!state) return;
    const half = canvas.width / 2;
    drawCloud(ctx, view, state.points, (i) => cpColour(state.prediction[i]), [0, 0, half, canvas.height]);
    drawCloud(ctx, view, state.points, (i) => cpColour(state.truth[i]), [half, 0, half, canvas.height]);
  });
  const drawCurve = () => {
    cctx.clearRect(0, 0, curve.width, curve.height);
    if (history.length < 2) return;
    const logs = history.map(Math.log10), lo = Math.min(...logs), hi = Math.max(...logs);
    cctx.strokeStyle = "#c33";
    cctx.beginPath();
    logs.forEach((v, k) => {
      const x = (k / (logs.length - 1)) * curve.width;
      const y = curve.height - ((v - lo) / (hi - lo || 1)) * (curve.height - 10) - 5;
      k ? cctx.lineTo(x, y) : cctx.moveTo(x, y);
    });
    cctx.stroke();
  };
  const tick = () => {
    if (!running) return;
    state = JSON.parse(trainer.advance(2));
    history.push(state.rel_l2);
    $("train-stats").textContent =
      `epoch ${state.epoch}/${state.epochs}, loss ${state.loss === null ? "n/a" : state.loss.toFixed(4)}, relative L2 error ${(100 * state.rel_l2).toFixed(2)}%`;
    view.draw();
    drawCurve();
    if (state.epoch >= state.epochs) {
      running = false;
      $("train-stop").disabled = true;
      $("train-start").textContent = "restart";
      return;
    }
    requestAnimationFrame(tick);
  };
  $("train-start").addEventListener("click", () => {
    if (!trainer || state?.epoch >= state?.epochs || $("train-start").textContent === "restart") {
      trainer?.free();
      trainer = new MicroTrainer(400, +$("train-epochs").value, +$("train-lr").value, 1);
      history = [];
    }
    running = true;
    $("train-start").textContent = "resume";
    $("train-stop").disabled = false;
    requestAnimationFrame(tick);
  });
  $("train-stop").addEventListener("click", () => {
    running = false;
    $("train-stop").disabled = true;
  });
}

await init();
setupPooling();
setupFlow();
setupTraining();
