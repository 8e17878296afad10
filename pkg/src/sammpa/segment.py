"""Promptable segmentation backends and the post-refinement loop."""
from __future__ import annotations

import logging
import threading
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import _kernels
from .backend import BackendError
from .core import BinaryMask, DataError, ImageTensor, load_mask, save_image
from .prompt import PromptSet, soften_mask
from .register.field import write_grid

log = logging.getLogger(__name__)


class SegmentationError(RuntimeError):
    pass


@dataclass(frozen=True)
class SegmentationRequest:
    sample_id: str
    image: ImageTensor
    prompts: PromptSet
    round: int = 0

    def __post_init__(self):
        h, w = self.image.shape
        for p in self.prompts.points:
            if not (0 <= p.x <= w - 1 and 0 <= p.y <= h - 1):
                raise DataError(f"prompt point {p} outside a {h}x{w} image")
        b = self.prompts.box
        if b.x_min < 0 or b.y_min < 0 or b.x_max > w - 1 or b.y_max > h - 1:
            raise DataError(f"prompt box {b} outside a {h}x{w} image")


@dataclass(frozen=True)
class SegmentationResult:
    mask: BinaryMask
    confidence: float
    round: int = 0
    warning: Optional[str] = None


def _pixel(v: float, n: int) -> int:
    return min(max(int(np.floor(v + 0.5)), 0), n - 1)


def mock_segment(image: ImageTensor, prompts: PromptSet, tol: float = 0.1) -> SegmentationResult:
    """Deterministic stand-in for a promptable segmenter.

    Grows a 4-connected region from the foreground point over pixels whose
    intensity is within ``tol`` of the seed, clips it to the box and removes
    the background-point pixels. Mask logits are ignored. A fallback prompt
    set carries no object evidence and gives an empty mask.
    """
    h, w = image.shape
    if prompts.fallback_flag:
        return SegmentationResult(BinaryMask.empty(h, w), 0.0)
    gray = np.ascontiguousarray(image.gray())
    fg = prompts.foreground
    grown = _kernels.region_grow(gray, _pixel(fg.y, h), _pixel(fg.x, w), float(tol))
    b = prompts.box
    out = np.zeros((h, w), dtype=bool)
    out[b.y_min:b.y_max + 1, b.x_min:b.x_max + 1] = grown[b.y_min:b.y_max + 1, b.x_min:b.x_max + 1]
    for p in prompts.background:
        out[_pixel(p.y, h), _pixel(p.x, w)] = False
    conf = min(1.0, max(0.0, out.sum() / b.area))
    return SegmentationResult(BinaryMask(out), float(conf))


class Segmenter:
    """Base backend: result cache keyed by (sample id, round, prompt digest) and a call counter.

    The round is part of the key so a refinement round always reaches the
    backend, even when its mask prompt equals the previous one.
    """

    name = "base"

    def __init__(self):
        self._cache: dict = {}
        self._lock = threading.Lock()
        self.calls = 0

    def _predict(self, request: SegmentationRequest) -> SegmentationResult:
        raise NotImplementedError

    def segment(self, request: SegmentationRequest) -> SegmentationResult:
        key = (request.sample_id, request.round, request.prompts.digest())
        with self._lock:
            hit = self._cache.get(key)
        if hit is not None:
            return hit
        with self._lock:
            self.calls += 1
        res = self._predict(request)
        if res.mask.shape != request.image.shape:
            raise SegmentationError(
                f"backend mask {res.mask.shape} does not match image {request.image.shape}")
        if not 0.0 <= res.confidence <= 1.0:
            raise SegmentationError(f"confidence {res.confidence} outside [0, 1]")
        with self._lock:
            self._cache[key] = res
        return res

    def close(self):
        pass


class MockSegmenter(Segmenter):
    name = "mock"

    def __init__(self, tol: float = 0.1):
        super().__init__()
        self.tol = tol

    def _predict(self, request):
        return mock_segment(request.image, request.prompts, self.tol)


class ExternalSegmenter(Segmenter):
    """Segmenter behind the NDJSON wire protocol.

    Inputs are exchanged by file: the image as PNG, mask logits as a
    one-channel MPAD grid, the answer as a {0,255} PNG. A reply may list
    several candidate masks with confidences; the most confident one wins.
    """

    name = "external"

    def __init__(self, client, work_dir):
        super().__init__()
        if client.hello_reply.get("kind") != "segmenter":
            raise SegmentationError(
                f"backend is a {client.hello_reply.get('kind')!r}, not a segmenter")
        self.client = client
        self.work_dir = Path(work_dir)
        self.work_dir.mkdir(parents=True, exist_ok=True)
        self._seq = 0

    def _predict(self, request):
        with self._lock:
            self._seq += 1
            tag = f"{request.sample_id}.{self._seq}"
        img_path = self.work_dir / f"{tag}.png"
        logit_path = self.work_dir / f"{tag}.logits.mpad"
        save_image(request.image, img_path)
        write_grid(logit_path, request.prompts.mask_logits)
        p = request.prompts
        reply = self.client.request({
            "op": "segment",
            "id": request.sample_id,
            "image": str(img_path),
            "points": [pt.as_list() for pt in p.points],
            "box": p.box.as_list(),
            "mask_logits": str(logit_path),
        })
        if "masks" in reply:
            masks = reply["masks"]
            confs = reply.get("confidences")
            if not masks or not isinstance(confs, list) or len(confs) != len(masks):
                raise SegmentationError("malformed multi-mask reply")
            best = int(np.argmax(confs))
            mask_path, conf = masks[best], confs[best]
        else:
            mask_path, conf = reply.get("mask"), reply.get("confidence")
        if not isinstance(mask_path, str) or not isinstance(conf, (int, float)):
            raise SegmentationError(f"malformed segment reply: {reply}")
        mask = load_mask(mask_path, target_size=None)
        return SegmentationResult(mask, float(conf))

    def close(self):
        self.client.close()


def segment(backend: Segmenter, request: SegmentationRequest) -> SegmentationResult:
    return backend.segment(request)


def refine(backend: Segmenter, image: ImageTensor, prompts: PromptSet,
           prev: SegmentationResult, rounds: int = 1, sample_id: str = "",
           soften_scale: float = 0.5) -> SegmentationResult:
    """Re-run the segmenter with its own previous mask as the mask prompt.

    Points and box are re-sent unchanged each round. A backend failure stops
    the loop and returns the last good result with ``warning`` set.
    """
    if rounds < 0:
        raise ValueError("rounds must be >= 0")
    current = prev
    for _ in range(rounds):
        req = SegmentationRequest(sample_id, image,
                                  prompts.with_logits(soften_mask(current.mask, soften_scale)),
                                  round=current.round + 1)
        try:
            res = backend.segment(req)
        except (BackendError, SegmentationError, OSError, DataError) as exc:
            log.warning("refinement of %s stopped after round %d: %s",
                        sample_id, current.round, exc)
            return replace(current, warning=f"refinement aborted: {exc}")
        current = replace(res, round=current.round + 1)
    return current
