// Browser entry point: canvas display, orbit drag / wheel zoom, a time
// scrubber with play/pause, and a latency/fps HUD. Server address comes from
// URL query parameters (?host=...&port=...).

import { DisplayedFrame, ViewerClient, WebSocketTransport } from './client';
import { InfoMsg } from './protocol';

function query(name: string, fallback: string): string {
  return new URLSearchParams(window.location.search).get(name) ?? fallback;
}

function el<K extends keyof HTMLElementTagNameMap>(tag: K, parent: HTMLElement): HTMLElementTagNameMap[K] {
  const node = document.createElement(tag);
  parent.appendChild(node);
  return node;
}

export function boot(root: HTMLElement): void {
  const host = query('host', window.location.hostname || '127.0.0.1');
  const port = query('port', '8799');

  const canvas = el('canvas', root);
  canvas.width = 256;
  canvas.height = 256;
  canvas.style.cursor = 'grab';
  const ctx = canvas.getContext('2d')!;

  const controls = el('div', root);
  const playBtn = el('button', controls);
  playBtn.textContent = 'Play';
  const slider = el('input', controls);
  slider.type = 'range';
  slider.min = '0';
  slider.max = '1';
  slider.step = '0.001';
  slider.value = '0';
  slider.style.width = '60%';
  const hud = el('pre', root);
  hud.textContent = 'connecting...';

  const transport = new WebSocketTransport(`ws://${host}:${port}`);

  const client = new ViewerClient(transport, {
    state: { width: canvas.width, height: canvas.height },
    onDisplay: (frame) => drawFrame(frame),
    onError: (reason) => {
      hud.textContent = `error: ${reason}`;
    },
  });

  async function drawFrame(frame: DisplayedFrame): Promise<void> {
    const mime = frame.format === 2 ? 'image/png' : 'image/jpeg';
    const bitmap = await createImageBitmap(new Blob([frame.payload.slice()], { type: mime }));
    ctx.drawImage(bitmap, 0, 0, canvas.width, canvas.height);
    const server = frame.timing.queue_ms + frame.timing.render_ms + frame.timing.encode_ms;
    hud.textContent =
      `latency ${frame.latencyMs.toFixed(1)} ms ` +
      `(server ${server.toFixed(1)} ms) | ` +
      `${client.state.stats.fps} fps | t=${client.state.time.toFixed(3)}`;
    slider.value = String(client.state.time);
  }

  // ---- input wiring ----
  let dragging = false;
  let last: [number, number] = [0, 0];
  canvas.addEventListener('pointerdown', (ev) => {
    dragging = true;
    last = [ev.clientX, ev.clientY];
    canvas.setPointerCapture(ev.pointerId);
  });
  canvas.addEventListener('pointermove', (ev) => {
    if (!dragging) return;
    const dx = ev.clientX - last[0];
    const dy = ev.clientY - last[1];
    last = [ev.clientX, ev.clientY];
    client.handleInput({ kind: 'drag', dx, dy });
  });
  canvas.addEventListener('pointerup', () => {
    dragging = false;
  });
  canvas.addEventListener('wheel', (ev) => {
    ev.preventDefault();
    client.handleInput({ kind: 'wheel', factor: ev.deltaY > 0 ? 1.1 : 1 / 1.1 });
  });
  slider.addEventListener('input', () => {
    client.handleInput({ kind: 'scrub', time: Number(slider.value) });
  });
  playBtn.addEventListener('click', () => {
    client.handleInput({ kind: 'play_toggle' });
    playBtn.textContent = client.state.playing ? 'Pause' : 'Play';
  });

  // playback clock
  let lastTick = performance.now();
  setInterval(() => {
    const now = performance.now();
    client.tick((now - lastTick) / 1000);
    lastTick = now;
  }, 50);

  transport.onOpen(() => {
    transport.send(JSON.stringify({ type: 'info' }));
    client.start();
    hud.textContent = 'connected';
  });

  // pick up frame count from the info reply for playback pacing
  transport.onMessage((data) => {
    if (typeof data !== 'string') return;
    const msg = JSON.parse(data);
    if (msg.type === 'info') {
      const info = msg as InfoMsg;
      client.state = { ...client.state, nFrames: info.n_frame };
    }
  });
}

if (typeof document !== 'undefined' && document.getElementById('app')) {
  boot(document.getElementById('app')!);
}
