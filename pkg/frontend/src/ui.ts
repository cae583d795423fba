/** DOM wiring: session panel, steer controls, filmstrip, schedule heatmap. */

import { ApiClient, Pose } from "./api.js";
import { heatmapModel } from "./schedule.js";
import { ExplorerStore, Layer } from "./store.js";

const KEY_COMMANDS: Record<string, string> = {
  w: "forward",
  s: "back",
  a: "left",
  d: "right",
  q: "yaw-",
  e: "yaw+",
  r: "pitch+",
  f: "pitch-",
  o: "orbit",
};

export function mountExplorer(root: HTMLElement, client: ApiClient): ExplorerStore {
  const store = new ExplorerStore(client);
  root.innerHTML = `
    <div class="panel session-panel">
      <label>scene seed <input id="scene-seed" type="number" value="0"></label>
      <button id="create-session">new session</button>
      <span id="session-label">no session</span>
      <span id="pose-label"></span>
    </div>
    <div class="panel steer-panel">
      ${Object.values(KEY_COMMANDS)
        .map((c) => `<button class="steer" data-command="${c}">${c}</button>`)
        .join("")}
      <label>magnitude
        <input id="magnitude" type="range" min="0" max="1" step="0.05" value="0.2">
      </label>
      <details>
        <summary>explicit poses</summary>
        <textarea id="pose-json" rows="4" placeholder='[{"quaternion":[1,0,0,0],"translation":[0,0,0]}]'></textarea>
        <button id="step-poses" class="steer">step with poses</button>
      </details>
    </div>
    <div class="panel banner" id="error-banner" hidden></div>
    <div class="panel viewer">
      <img id="main-frame" alt="current frame">
      <div>
        ${(["generated", "prior", "mask"] as Layer[])
          .map((l) => `<label><input type="radio" name="layer" value="${l}"
              ${l === "generated" ? "checked" : ""}>${l}</label>`)
          .join("")}
      </div>
      <input id="scrubber" type="range" min="0" max="0" value="0">
      <div id="filmstrip" class="filmstrip"></div>
    </div>
    <div class="panel">
      <canvas id="heatmap" width="520" height="160"></canvas>
    </div>`;

  const el = <T extends HTMLElement>(sel: string): T => root.querySelector(sel) as T;
  const banner = el<HTMLDivElement>("#error-banner");
  const filmstripEl = el<HTMLDivElement>("#filmstrip");
  const scrubber = el<HTMLInputElement>("#scrubber");
  const mainFrame = el<HTMLImageElement>("#main-frame");
  const heatmap = el<HTMLCanvasElement>("#heatmap");

  function render(): void {
    el<HTMLSpanElement>("#session-label").textContent = store.session
      ? `session ${store.session.session_id.slice(0, 8)} · chunk ${store.chunkCounter}`
      : "no session";
    const pose = store.lastPoses[store.lastPoses.length - 1];
    el<HTMLSpanElement>("#pose-label").textContent = pose
      ? `t=[${pose.translation.map((x) => x.toFixed(2)).join(", ")}]`
      : "";
    banner.hidden = store.lastError === null;
    banner.textContent = store.lastError ?? "";
    root.querySelectorAll<HTMLButtonElement>("button.steer").forEach((b) => {
      b.disabled = store.stepInFlight || store.session === null;
    });

    scrubber.max = String(Math.max(store.filmstrip.length - 1, 0));
    scrubber.value = String(store.scrubIndex);
    const ref = store.visibleRef();
    if (ref) mainFrame.src = client.frameUrl(ref);

    filmstripEl.innerHTML = "";
    store.filmstrip.forEach((entry, i) => {
      const img = document.createElement("img");
      const layerRef =
        store.layer === "prior" ? entry.priorRef ?? entry.frameRef :
        store.layer === "mask" ? entry.maskRef ?? entry.frameRef : entry.frameRef;
      img.src = client.frameUrl(layerRef);
      img.title = `frame ${i} (chunk ${entry.chunkIndex})`;
      img.className = i === store.scrubIndex ? "selected" : "";
      img.addEventListener("click", () => store.setScrub(i));
      filmstripEl.appendChild(img);
    });

    const ctx = heatmap.getContext("2d");
    if (ctx && store.schedule) {
      const model = heatmapModel(store.schedule);
      const cw = heatmap.width / Math.max(model.cols, 1);
      const ch = heatmap.height / Math.max(model.rows, 1);
      for (let r = 0; r < model.rows; r++) {
        for (let c = 0; c < model.cols; c++) {
          ctx.fillStyle = model.cellColor(r, c);
          ctx.fillRect(c * cw, r * ch, Math.ceil(cw), Math.ceil(ch));
        }
      }
    }
  }

  store.subscribe(render);

  el<HTMLButtonElement>("#create-session").addEventListener("click", () => {
    const seed = Number(el<HTMLInputElement>("#scene-seed").value);
    void store.createSession({ scene_seed: seed });
  });
  root.querySelectorAll<HTMLButtonElement>("button.steer[data-command]").forEach((b) => {
    b.addEventListener("click", () => {
      const magnitude = Number(el<HTMLInputElement>("#magnitude").value);
      void store.steer(b.dataset.command as string, magnitude);
    });
  });
  el<HTMLButtonElement>("#step-poses").addEventListener("click", () => {
    try {
      const poses = JSON.parse(el<HTMLTextAreaElement>("#pose-json").value) as Pose[];
      void store.stepWithPoses(poses);
    } catch (err) {
      store.lastError = `bad pose JSON: ${String(err)}`;
      render();
    }
  });
  scrubber.addEventListener("input", () => store.setScrub(Number(scrubber.value)));
  root.querySelectorAll<HTMLInputElement>("input[name=layer]").forEach((radio) => {
    radio.addEventListener("change", () => store.setLayer(radio.value as Layer));
  });
  document.addEventListener("keydown", (ev) => {
    const command = KEY_COMMANDS[ev.key];
    if (command && !store.stepInFlight) {
      const magnitude = Number(el<HTMLInputElement>("#magnitude").value);
      void store.steer(command, magnitude);
    }
  });

  render();
  return store;
}
