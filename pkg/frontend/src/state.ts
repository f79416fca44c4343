// Viewer state machine: orbit navigation, time scrubbing, and latest-wins
// request coalescing. All transitions are pure functions of (state, event),
// so the whole async-drawing contract is unit-testable without a browser.
//
// Invariants: at most one request in flight; the displayed image always
// corresponds to the most recent ok response; a newer desired state never
// waits behind more than the single in-flight render.

import { OrbitParams, RenderRequest, RenderedMsg, ServerMsg } from './protocol';

export interface Desire {
  orbit: OrbitParams;
  time: number;
}

export interface InFlight {
  id: number;
  desire: Desire;
  sentAt: number;
}

export interface HudStats {
  latencyMs: number | null; // end-to-end latency of the displayed frame
  displayTimes: number[]; // recent display timestamps for the fps readout
  fps: number;
}

export interface ViewerState {
  orbit: OrbitParams;
  time: number;
  playing: boolean;
  playbackFps: number;
  nFrames: number;
  width: number;
  height: number;
  quality: number;
  nextId: number;
  inFlight: InFlight | null;
  latestDesired: Desire;
  displayed: { id: number; desire: Desire } | null;
  stats: HudStats;
}

export type InputEvent =
  | { kind: 'drag'; dx: number; dy: number }
  | { kind: 'wheel'; factor: number }
  | { kind: 'scrub'; time: number }
  | { kind: 'play_toggle' };

export const DRAG_DEGREES_PER_PIXEL = 0.4;
export const ELEVATION_LIMIT = 89;

export function initialState(overrides: Partial<ViewerState> = {}): ViewerState {
  const orbit: OrbitParams = {
    azimuth: 0,
    elevation: 15,
    radius: 4,
    target: [0, 0, 0],
    fov: 40,
  };
  const state: ViewerState = {
    orbit,
    time: 0,
    playing: false,
    playbackFps: 8,
    nFrames: 1,
    width: 256,
    height: 256,
    quality: 85,
    nextId: 0,
    inFlight: null,
    latestDesired: { orbit: { ...orbit }, time: 0 },
    displayed: null,
    stats: { latencyMs: null, displayTimes: [], fps: 0 },
  };
  return { ...state, ...overrides };
}

function snapshot(state: ViewerState): Desire {
  return {
    orbit: { ...state.orbit, target: [...state.orbit.target] as [number, number, number] },
    time: state.time,
  };
}

export function sameDesire(a: Desire, b: Desire): boolean {
  return (
    a.time === b.time &&
    a.orbit.azimuth === b.orbit.azimuth &&
    a.orbit.elevation === b.orbit.elevation &&
    a.orbit.radius === b.orbit.radius &&
    a.orbit.fov === b.orbit.fov &&
    a.orbit.target.every((v, i) => v === b.orbit.target[i])
  );
}

function makeRequest(state: ViewerState, desire: Desire, now: number): [ViewerState, RenderRequest] {
  const id = state.nextId;
  const request: RenderRequest = {
    type: 'render',
    id,
    camera: desire.orbit,
    time: desire.time,
    width: state.width,
    height: state.height,
    quality: state.quality,
  };
  return [{ ...state, nextId: id + 1, inFlight: { id, desire, sentAt: now } }, request];
}

/** Dispatch the latest desire if nothing is in flight and it is stale. */
export function kick(state: ViewerState, now: number): [ViewerState, RenderRequest | null] {
  if (state.inFlight !== null) return [state, null];
  const shown = state.displayed?.desire;
  if (shown !== undefined && sameDesire(shown, state.latestDesired)) return [state, null];
  return makeRequest(state, state.latestDesired, now);
}

const maybeDispatch = kick;

export function onInput(
  state: ViewerState,
  event: InputEvent,
  now: number,
): [ViewerState, RenderRequest | null] {
  let next = { ...state, orbit: { ...state.orbit } };
  switch (event.kind) {
    case 'drag': {
      next.orbit.azimuth += event.dx * DRAG_DEGREES_PER_PIXEL;
      next.orbit.elevation = Math.min(
        ELEVATION_LIMIT,
        Math.max(-ELEVATION_LIMIT, next.orbit.elevation + event.dy * DRAG_DEGREES_PER_PIXEL),
      );
      break;
    }
    case 'wheel':
      next.orbit.radius *= event.factor;
      break;
    case 'scrub':
      next.time = Math.min(1, Math.max(0, event.time));
      break;
    case 'play_toggle':
      next.playing = !next.playing;
      return [next, null]; // playback ticks drive the follow-up renders
  }
  next.latestDesired = snapshot(next);
  return maybeDispatch(next, now);
}

export function playbackTick(
  state: ViewerState,
  elapsedSeconds: number,
  now: number,
): [ViewerState, RenderRequest | null] {
  if (!state.playing) return [state, null];
  const advance = (elapsedSeconds * state.playbackFps) / Math.max(state.nFrames, 1);
  const next = { ...state, time: (state.time + advance) % 1 };
  next.latestDesired = snapshot(next);
  return maybeDispatch(next, now);
}

export interface DisplayAction {
  /** The response to decode and draw, when this transition displays a frame. */
  display: RenderedMsg | null;
}

export function onResponse(
  state: ViewerState,
  msg: ServerMsg,
  now: number,
): [ViewerState, RenderRequest | null, DisplayAction] {
  if (!('id' in msg) || msg.id === null || msg.type === 'info') {
    return [state, null, { display: null }];
  }
  const matches = state.inFlight !== null && state.inFlight.id === msg.id;
  if (msg.type === 'rendered' && msg.status === 'ok') {
    let next = { ...state };
    let display: RenderedMsg | null = null;
    if (matches) {
      const flight = state.inFlight!;
      next.displayed = { id: msg.id, desire: flight.desire };
      next.inFlight = null;
      const times = [...state.stats.displayTimes, now].filter((t) => now - t <= 1000);
      next.stats = {
        latencyMs: now - flight.sentAt,
        displayTimes: times,
        fps: times.length,
      };
      display = msg;
    }
    const [after, request] = maybeDispatch(next, now);
    return [after, request, { display }];
  }
  // superseded / error / stale: update nothing, clear matching bookkeeping
  let next = state;
  if (matches) {
    next = { ...state, inFlight: null };
  }
  const [after, request] = maybeDispatch(next, now);
  return [after, request, { display: null }];
}
