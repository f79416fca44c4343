"""Render service and CLI entry points.

The server speaks a websocket protocol: JSON control frames (one message per
frame, canonical encoding) and binary payload frames with a 16-byte header
(magic "VCAP", u32 request id LE, u32 payload length LE, u16 format code LE,
u16 reserved). Per connection the server keeps a pending slot of size one: a
new render request supersedes any not-yet-started pending request, and the
request already rendering runs to completion. Responses for id-carrying
requests are delivered in strictly increasing id order.
"""

from __future__ import annotations

import argparse
import asyncio
import io
import json
import math
import struct
import sys
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from . import config as config_mod
from .components import build_pipeline, resolve_bounds
from .dataset import AABB, look_at_camera, load_dataset
from .playback import FrameCache
from .trainer import TrainError, apply_checkpoint, build_parameter_set, load_checkpoint

__all__ = [
    "FORMAT_JPEG",
    "FORMAT_PNG",
    "ProtocolError",
    "RenderServer",
    "cli_main",
    "decode_binary_frame",
    "decode_message",
    "encode_binary_frame",
    "encode_message",
    "main",
    "orbit_camera",
]

MAGIC = b"VCAP"
FORMAT_JPEG = 1
FORMAT_PNG = 2
DEFAULT_PORT = 8799
DEFAULT_MAX_PIXELS = 1048576


class ProtocolError(ValueError):
    pass


# ---------------------------------------------------------------------------
# wire protocol


def encode_message(msg: dict) -> bytes:
    """Canonical JSON control frame: sorted keys, compact separators."""
    return json.dumps(msg, sort_keys=True, separators=(",", ":")).encode()


def decode_message(data) -> dict:
    if isinstance(data, bytes):
        data = data.decode("utf-8", errors="strict")
    try:
        msg = json.loads(data)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ProtocolError(f"unparseable control frame: {exc}") from exc
    if not isinstance(msg, dict) or "type" not in msg:
        raise ProtocolError("control frame must be an object with a 'type' field")
    return msg


def encode_binary_frame(request_id: int, format_code: int, payload: bytes) -> bytes:
    header = MAGIC + struct.pack("<IIHH", request_id, len(payload), format_code, 0)
    return header + payload


def decode_binary_frame(data: bytes):
    if len(data) < 16 or data[:4] != MAGIC:
        raise ProtocolError("bad binary frame header")
    request_id, length, format_code, _reserved = struct.unpack("<IIHH", data[4:16])
    payload = data[16 : 16 + length]
    if len(payload) != length:
        raise ProtocolError(f"binary frame truncated: expected {length} bytes, got {len(payload)}")
    return request_id, format_code, payload


# ---------------------------------------------------------------------------
# cameras


def orbit_camera(orbit: dict, width: int, height: int, bounds: AABB):
    """Resolve orbit parameters (degrees) to a camera; y-up look-at."""
    az = math.radians(float(orbit.get("azimuth", 0.0)))
    el = math.radians(float(orbit.get("elevation", 0.0)))
    radius = float(orbit.get("radius", 4.0))
    target = np.asarray(orbit.get("target", (0.0, 0.0, 0.0)), dtype=np.float64)
    fov = float(orbit.get("fov", 40.0))
    eye = target + radius * np.array(
        [math.cos(el) * math.sin(az), math.sin(el), math.cos(el) * math.cos(az)]
    )
    center = (bounds.lo + bounds.hi) / 2
    reach = float(np.linalg.norm(bounds.hi - bounds.lo)) / 2 or 1.0
    dist = float(np.linalg.norm(eye - center))
    near = max(1e-3, dist - 1.5 * reach)
    far = dist + 1.5 * reach
    return look_at_camera(eye, target, width, height, fov, near, far)


def request_camera(cam_spec: dict, width: int, height: int, bounds: AABB):
    if not isinstance(cam_spec, dict):
        raise ProtocolError("camera must be an object")
    if {"azimuth", "elevation", "radius"} & set(cam_spec):
        return orbit_camera(cam_spec, width, height, bounds)
    try:
        from .dataset import CameraModel

        return CameraModel(
            np.array(cam_spec["K"], dtype=np.float64),
            torch.tensor(cam_spec["R"], dtype=torch.float64).reshape(3, 3),
            torch.tensor(cam_spec["T"], dtype=torch.float64),
            float(cam_spec["near"]),
            float(cam_spec["far"]),
            width,
            height,
        )
    except KeyError as exc:
        raise ProtocolError(f"camera needs orbit parameters or K/R/T/near/far: missing {exc}") from exc


def encode_image(rgb: np.ndarray, quality) -> tuple[bytes, int]:
    """JPEG below quality 100, PNG for lossless."""
    img = Image.fromarray(np.round(np.clip(rgb, 0, 1) * 255).astype(np.uint8))
    buf = io.BytesIO()
    if quality == "lossless" or int(quality) >= 100:
        img.save(buf, format="PNG")
        return buf.getvalue(), FORMAT_PNG
    img.save(buf, format="JPEG", quality=int(quality))
    return buf.getvalue(), FORMAT_JPEG


# ---------------------------------------------------------------------------
# server


class RenderServer:
    """Owns the pipeline, the per-frame state cache, and one render executor.

    Rendering is serialized through a single worker thread; connection I/O
    stays on the event loop.
    """

    def __init__(self, pipeline, cameras, meta, bounds: AABB, cfg: dict, max_pixels=DEFAULT_MAX_PIXELS):
        self.pipeline = pipeline
        self.cameras = cameras
        self.meta = meta
        self.bounds = bounds
        self.cfg = cfg
        self.max_pixels = max_pixels
        self.executor = ThreadPoolExecutor(max_workers=1, thread_name_prefix="render")
        self.mode = "hierarchical" if cfg.get("model", {}).get("hierarchical", {}).get("enabled", False) else "single"
        pc = cfg.get("playback", {})
        self.cache = FrameCache(
            load_blob=self._frame_blob,
            decode=self._frame_state,
            n_frames=meta.n_frame,
            resident_capacity=pc.get("resident", 8),
            staging_capacity=pc.get("staging", 32),
            prefetch_depth=pc.get("prefetch", 4),
        )

    # per-frame model state: the conditioning rows every embedder keeps per
    # frame; the cache's tiers exercise the playback policy over them
    def _frame_blob(self, frame: int) -> bytes:
        return struct.pack("<I", frame)

    def _frame_state(self, frame: int, blob: bytes):
        (f,) = struct.unpack("<I", blob)
        rows = {}
        for name, p in self.pipeline.field.named_parameters():
            if p.shape and p.shape[0] == self.meta.n_frame and "codes" in name:
                rows[name] = p.detach()[f]
        return {"frame": f, "time": self.meta.times[f], "codes": rows}

    def info(self) -> dict:
        n_params = sum(p.numel() for p in self.pipeline.field.parameters())
        cams = [
            {
                "K": c.K.reshape(-1).tolist(),
                "R": c.R.double().reshape(-1).tolist(),
                "T": c.T.double().reshape(-1).tolist(),
                "near": c.near,
                "far": c.far,
                "width": c.width,
                "height": c.height,
            }
            for c in self.cameras
        ]
        stats = self.cache.stats()
        return {
            "type": "info",
            "n_frame": self.meta.n_frame,
            "n_view": self.meta.n_view,
            "width": self.meta.width,
            "height": self.meta.height,
            "bounds": [list(self.bounds.lo), list(self.bounds.hi)],
            "cameras": cams,
            "model": {"n_parameters": int(n_params), "mode": self.mode},
            "cache": {k: stats[k] for k in ("hits", "misses", "evictions", "stalls")},
        }

    def render_request(self, req: dict):
        """Blocking render + encode; runs on the executor thread."""
        width = int(req["width"])
        height = int(req["height"])
        cam = request_camera(req["camera"], width, height, self.bounds)
        t = min(max(float(req.get("time", 0.0)), 0.0), 1.0)
        frame = t * (self.meta.n_frame - 1)
        k0 = int(math.floor(frame))
        k1 = min(k0 + 1, self.meta.n_frame - 1)
        self.cache.seek(k0)
        self.cache.get_frame(k0)
        if k1 != k0:
            self.cache.get_frame(k1)
        t_render = time.perf_counter()
        out = self.pipeline.render_image(cam, t, chunk=16384, mode=self.mode)
        t_encode = time.perf_counter()
        payload, fmt = encode_image(out.rgb, req.get("quality", 85))
        t_done = time.perf_counter()
        return payload, fmt, (t_render, t_encode, t_done)

    async def handler(self, ws):
        conn = _Connection(ws, self)
        try:
            async for raw in ws:
                await conn.on_raw(raw)
        finally:
            conn.closed = True
            conn.work.set()  # unblock the render worker so it can exit


class _Connection:
    """Per-connection latest-wins state machine with id-ordered delivery."""

    def __init__(self, ws, server: RenderServer):
        self.ws = ws
        self.server = server
        self.rendering = None
        self.pending = None
        self.last_id = -1
        self.order: list[int] = []      # unanswered ids in arrival order
        self.results: dict[int, tuple] = {}
        self.worker_task = None
        self.work = asyncio.Event()
        self.closed = False

    async def on_raw(self, raw):
        try:
            msg = decode_message(raw)
        except ProtocolError as exc:
            await self.ws.send(encode_message({"type": "error", "id": None, "reason": str(exc)}))
            return
        kind = msg.get("type")
        if kind == "info":
            await self.ws.send(encode_message(self.server.info()))
        elif kind == "render":
            await self.on_render(msg)
        else:
            await self.ws.send(
                encode_message({"type": "error", "id": msg.get("id"), "reason": f"unknown message type {kind!r}"})
            )

    async def on_render(self, msg):
        rid = msg.get("id")
        if not isinstance(rid, int) or rid <= self.last_id:
            await self.ws.send(
                encode_message(
                    {"type": "error", "id": rid, "reason": "render id must be a strictly increasing integer"}
                )
            )
            return
        self.last_id = rid
        self.order.append(rid)
        err = self._validate(msg)
        if err is not None:
            await self._resolve(rid, {"type": "error", "id": rid, "reason": err})
            return
        msg["_arrival"] = time.perf_counter()
        if self.pending is not None:
            old = self.pending
            self.pending = msg
            await self._resolve(old["id"], {"type": "superseded", "id": old["id"]})
        else:
            self.pending = msg
        if self.worker_task is None:
            self.worker_task = asyncio.ensure_future(self._render_worker())
        self.work.set()

    def _validate(self, msg):
        width = msg.get("width")
        height = msg.get("height")
        if not (isinstance(width, int) and isinstance(height, int) and width > 0 and height > 0):
            return "width and height must be positive integers"
        if width * height > self.server.max_pixels:
            return f"image size {width}x{height} exceeds max pixels {self.server.max_pixels}"
        if not isinstance(msg.get("camera"), dict):
            return "camera must be an object"
        return None

    async def _render_worker(self):
        loop = asyncio.get_running_loop()
        while not self.closed:
            if self.pending is None:
                self.work.clear()
                await self.work.wait()
                continue
            req = self.pending
            self.pending = None
            self.rendering = req
            t_start = time.perf_counter()
            try:
                payload, fmt, (t_render, t_encode, t_done) = await loop.run_in_executor(
                    self.server.executor, self.server.render_request, req
                )
                timing = {
                    "queue_ms": (t_start - req["_arrival"]) * 1000.0,
                    "render_ms": (t_encode - t_render) * 1000.0,
                    "encode_ms": (t_done - t_encode) * 1000.0,
                }
                ctrl = {"type": "rendered", "id": req["id"], "status": "ok", "timing": timing}
                await self._resolve(req["id"], ctrl, binary=(fmt, payload))
            except Exception as exc:
                await self._resolve(req["id"], {"type": "error", "id": req["id"], "reason": str(exc)})
            finally:
                self.rendering = None

    async def _resolve(self, rid: int, control: dict, binary=None):
        self.results[rid] = (control, binary)
        while self.order and self.order[0] in self.results:
            head = self.order.pop(0)
            ctrl, bin_part = self.results.pop(head)
            try:
                await self.ws.send(encode_message(ctrl))
                if bin_part is not None:
                    fmt, payload = bin_part
                    await self.ws.send(encode_binary_frame(head, fmt, payload))
            except Exception:
                self.closed = True
                return


# ---------------------------------------------------------------------------
# server lifecycle


def build_server(cfg: dict, checkpoint, max_pixels=DEFAULT_MAX_PIXELS) -> RenderServer:
    store, cameras, meta = load_dataset(cfg["dataset"]["root"])
    bounds = resolve_bounds(cfg, store, cameras, meta)
    pipeline = build_pipeline(cfg, meta, bounds)
    pset = build_parameter_set(pipeline)
    arrays, _ = load_checkpoint(checkpoint)
    apply_checkpoint(pset, arrays)
    return RenderServer(pipeline, cameras, meta, bounds, cfg, max_pixels=max_pixels)


class ServerHandle:
    """A running server on a background thread, for tests and tooling."""

    def __init__(self, server: RenderServer, host="127.0.0.1", port=0):
        import websockets.asyncio.server as ws_server

        self.server = server
        self._loop = asyncio.new_event_loop()
        self._stopped = threading.Event()
        ready = threading.Event()
        holder = {}

        async def run():
            async with ws_server.serve(server.handler, host, port) as srv:
                holder["port"] = srv.sockets[0].getsockname()[1]
                ready.set()
                await self._loop.create_future()  # run until cancelled

        def runner():
            asyncio.set_event_loop(self._loop)
            try:
                self._loop.run_until_complete(run())
            except asyncio.CancelledError:
                pass
            finally:
                self._stopped.set()

        self._thread = threading.Thread(target=runner, daemon=True)
        self._thread.start()
        if not ready.wait(timeout=10):
            raise RuntimeError("server failed to start")
        self.port = holder["port"]

    def stop(self):
        def cancel_all():
            for task in asyncio.all_tasks(self._loop):
                task.cancel()

        self._loop.call_soon_threadsafe(cancel_all)
        self._thread.join(timeout=5)
        self.server.cache.close()
        self.server.executor.shutdown(wait=False)
        if not self._loop.is_running():
            self._loop.close()


def serve_forever(cfg: dict, checkpoint, host="0.0.0.0", port=DEFAULT_PORT, max_pixels=DEFAULT_MAX_PIXELS):
    import websockets.asyncio.server as ws_server

    server = build_server(cfg, checkpoint, max_pixels=max_pixels)

    async def run():
        async with ws_server.serve(server.handler, host, port):
            print(f"render service listening on ws://{host}:{port}", file=sys.stderr)
            await asyncio.Future()

    asyncio.run(run())


# ---------------------------------------------------------------------------
# command line


def _load_cfg(args) -> dict:
    node = config_mod.load_and_resolve(args.config, list(args.overrides or []))
    return node.data


def _default_checkpoint(cfg: dict) -> Path:
    return Path(cfg.get("runs_dir", "runs")) / str(cfg.get("exp_name", "exp")) / "ckpt_final.zip"


def cli_main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="voxvid", description="neural volumetric video engine")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("-c", "--config", required=True, help="config file (yaml or json)")
        p.add_argument("overrides", nargs="*", help="dotted.path=value config overrides")

    p_train = sub.add_parser("train", help="optimize a model on the configured dataset")
    common(p_train)

    p_render = sub.add_parser("render", help="render one frame from a checkpoint")
    common(p_render)
    p_render.add_argument("--checkpoint", default=None)
    p_render.add_argument("--camera-index", type=int, default=0)
    p_render.add_argument("--time", type=float, default=0.0)
    p_render.add_argument("--output", required=True)
    p_render.add_argument("--depth-output", default=None, help="16-bit depth PNG, normalized by far")

    p_eval = sub.add_parser("evaluate", help="report metrics for a checkpoint")
    common(p_eval)
    p_eval.add_argument("--checkpoint", default=None)
    p_eval.add_argument("--out", default=None)

    p_serve = sub.add_parser("serve", help="run the interactive render service")
    common(p_serve)
    p_serve.add_argument("--checkpoint", default=None)
    p_serve.add_argument("--port", type=int, default=DEFAULT_PORT)
    p_serve.add_argument("--host", default="0.0.0.0")
    p_serve.add_argument("--max-pixels", type=int, default=DEFAULT_MAX_PIXELS)

    p_probe = sub.add_parser("probe", help="inspect a dataset")
    common(p_probe)
    p_probe.add_argument("--cache-stats", action="store_true", help="exercise the frame cache and print stats")

    args = parser.parse_args(argv)
    try:
        return _dispatch(args)
    except (config_mod.ConfigError, TrainError, ProtocolError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def _dispatch(args) -> int:
    from . import trainer
    from .dataset import get_image

    cfg = _load_cfg(args)
    if args.command == "train":
        ckpt = trainer.train(cfg)
        print(ckpt)
        return 0

    if args.command == "render":
        ckpt = args.checkpoint or _default_checkpoint(cfg)
        arrays, _ = load_checkpoint(ckpt)
        store, cameras, meta = load_dataset(cfg["dataset"]["root"])
        bounds = resolve_bounds(cfg, store, cameras, meta)
        pipeline = build_pipeline(cfg, meta, bounds)
        apply_checkpoint(build_parameter_set(pipeline), arrays)
        if not 0 <= args.camera_index < len(cameras):
            raise ValueError(f"camera index {args.camera_index} out of range [0, {len(cameras)})")
        cam = cameras[args.camera_index]
        mode = "hierarchical" if cfg.get("model", {}).get("hierarchical", {}).get("enabled", False) else "single"
        out = pipeline.render_image(cam, args.time, mode=mode)
        Image.fromarray(np.round(out.rgb * 255).astype(np.uint8)).save(args.output)
        if args.depth_output:
            depth = np.clip(out.depth / cam.far, 0, 1)
            Image.fromarray((depth * 65535).astype(np.uint16)).save(args.depth_output)
        print(args.output)
        return 0

    if args.command == "evaluate":
        ckpt = args.checkpoint or _default_checkpoint(cfg)
        out_dir = args.out or (Path(cfg.get("runs_dir", "runs")) / str(cfg.get("exp_name", "exp")) / "eval")
        report = trainer.evaluate(cfg, ckpt, out_dir=out_dir)
        print(json.dumps(report, indent=1, sort_keys=True))
        return 0

    if args.command == "serve":
        ckpt = args.checkpoint or _default_checkpoint(cfg)
        serve_forever(cfg, ckpt, host=args.host, port=args.port, max_pixels=args.max_pixels)
        return 0

    if args.command == "probe":
        store, cameras, meta = load_dataset(cfg["dataset"]["root"])
        print(f"n_frame={meta.n_frame} n_view={meta.n_view} size={meta.width}x{meta.height}")
        if args.cache_stats:
            pc = cfg.get("playback", {})
            cache = FrameCache(
                load_blob=lambda f: store.blobs[(f, 0)],
                decode=lambda f, blob: get_image(store, f, 0),
                n_frames=meta.n_frame,
                resident_capacity=pc.get("resident", 8),
                staging_capacity=pc.get("staging", 32),
                prefetch_depth=pc.get("prefetch", 4),
            )
            for f in range(meta.n_frame):
                cache.seek(f)
                cache.get_frame(f)
                cache.drain()
            stats = cache.stats()
            cache.close()
            print(json.dumps({k: stats[k] for k in ("hits", "misses", "evictions", "stalls")}))
        return 0

    return 2


def main():
    sys.exit(cli_main())
