// Viewer client: owns the state machine, talks to a transport, and pairs
// rendered control frames with their binary payloads. The transport is
// abstract so tests can drive the client against a scripted mock server.

import { BinaryFrame, decodeBinaryFrame, decodeControl, encodeControl, RenderedMsg, ServerMsg } from './protocol';
import {
  initialState,
  InputEvent,
  kick,
  onInput,
  onResponse,
  playbackTick,
  ViewerState,
} from './state';

export interface Transport {
  send(text: string): void;
  onMessage(handler: (data: string | ArrayBuffer) => void): void;
  onOpen?(handler: () => void): void;
}

export interface DisplayedFrame {
  id: number;
  payload: Uint8Array;
  format: number;
  timing: RenderedMsg['timing'];
  latencyMs: number;
}

export class ViewerClient {
  state: ViewerState;
  private pendingControl: RenderedMsg | null = null;
  private onDisplay: (frame: DisplayedFrame) => void;
  private onError: (reason: string) => void;
  private now: () => number;

  constructor(
    private transport: Transport,
    opts: {
      state?: Partial<ViewerState>;
      onDisplay?: (frame: DisplayedFrame) => void;
      onError?: (reason: string) => void;
      now?: () => number;
    } = {},
  ) {
    this.state = initialState(opts.state ?? {});
    this.onDisplay = opts.onDisplay ?? (() => {});
    this.onError = opts.onError ?? (() => {});
    this.now = opts.now ?? (() => performance.now());
    transport.onMessage((data) => this.handleMessage(data));
  }

  /** Request the first frame (or re-sync after reconfiguration). */
  start(): void {
    const [state, request] = kick(this.state, this.now());
    this.state = state;
    if (request) this.transport.send(encodeControl(request));
  }

  handleInput(event: InputEvent): void {
    const [state, request] = onInput(this.state, event, this.now());
    this.state = state;
    if (request) this.transport.send(encodeControl(request));
  }

  tick(elapsedSeconds: number): void {
    const [state, request] = playbackTick(this.state, elapsedSeconds, this.now());
    this.state = state;
    if (request) this.transport.send(encodeControl(request));
  }

  private handleMessage(data: string | ArrayBuffer): void {
    if (typeof data !== 'string') {
      this.handleBinary(decodeBinaryFrame(data));
      return;
    }
    let msg: ServerMsg;
    try {
      msg = decodeControl(data);
    } catch (err) {
      this.onError(String(err));
      return;
    }
    if (msg.type === 'error') {
      this.onError(msg.reason);
    }
    if (msg.type === 'rendered' && msg.status === 'ok') {
      // hold until the binary payload arrives; the server sends it next
      this.pendingControl = msg;
      return;
    }
    this.applyResponse(msg);
  }

  private handleBinary(frame: BinaryFrame): void {
    const ctrl = this.pendingControl;
    this.pendingControl = null;
    if (ctrl === null || ctrl.id !== frame.id) {
      this.onError(`unexpected binary frame for request ${frame.id}`);
      return;
    }
    const flight = this.state.inFlight;
    const wasInFlight = flight !== null && flight.id === ctrl.id;
    const sentAt = wasInFlight ? flight!.sentAt : null;
    this.applyResponse(ctrl);
    if (wasInFlight && sentAt !== null) {
      this.onDisplay({
        id: ctrl.id,
        payload: frame.payload,
        format: frame.format,
        timing: ctrl.timing,
        latencyMs: this.now() - sentAt,
      });
    }
  }

  private applyResponse(msg: ServerMsg): void {
    const [state, request] = onResponse(this.state, msg, this.now());
    this.state = state;
    if (request) this.transport.send(encodeControl(request));
  }
}

export class WebSocketTransport implements Transport {
  private ws: WebSocket;
  private handlers: ((data: string | ArrayBuffer) => void)[] = [];
  private openHandlers: (() => void)[] = [];

  constructor(url: string) {
    this.ws = new WebSocket(url);
    this.ws.binaryType = 'arraybuffer';
    this.ws.onmessage = (ev) => {
      for (const h of this.handlers) h(ev.data);
    };
    this.ws.onopen = () => {
      for (const h of this.openHandlers) h();
    };
  }

  send(text: string): void {
    this.ws.send(text);
  }

  onMessage(handler: (data: string | ArrayBuffer) => void): void {
    this.handlers.push(handler);
  }

  onOpen(handler: () => void): void {
    this.openHandlers.push(handler);
  }
}
