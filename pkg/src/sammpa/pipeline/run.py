"""End-to-end orchestration: select, propagate, prompt, segment, refine, score."""
from __future__ import annotations

import hashlib
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .. import __version__, _kernels
from ..backend import BackendClient, BackendError
from ..core import (
    BinaryMask,
    DataError,
    ImageTensor,
    dice,
    list_dataset,
    load_image,
    load_mask,
    save_mask,
)
from ..embed import (
    EmbeddingError,
    ExternalEmbedder,
    ToyEmbedder,
    cache_path,
    cache_read,
    cache_write,
)
from ..prompt import generate_prompts
from ..register import propagate_mask, register, write_field
from ..segment import ExternalSegmenter, MockSegmenter, SegmentationRequest, refine
from ..select import SelectionResult, fixed_support, select_support
from .config import PipelineConfig
from .report import QueryRecord, RunReport, aggregate

log = logging.getLogger(__name__)


class PipelineError(RuntimeError):
    """A failure that stops the whole run (unreadable dataset, backend down)."""


@dataclass
class _Sample:
    id: str
    image: ImageTensor
    gray: ImageTensor
    mask: Optional[BinaryMask]
    image_path: Path
    mask_path: Optional[Path]


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _load_samples(cfg: PipelineConfig) -> list[_Sample]:
    try:
        records = list_dataset(cfg.dataset_root)
    except DataError as exc:
        raise PipelineError(str(exc)) from exc
    out = []
    for r in records:
        try:
            img = load_image(r.image_path, cfg.image_size)
            mask = load_mask(r.mask_path, cfg.image_size) if r.mask_path else None
        except DataError as exc:
            raise PipelineError(str(exc)) from exc
        gray = img if img.channels == 1 else ImageTensor(img.gray().astype(np.float32))
        out.append(_Sample(r.id, img, gray, mask, r.image_path, r.mask_path))
    return out


def _embedder(cfg: PipelineConfig, out: Path):
    if cfg.embedding_backend == "toy":
        emb = ToyEmbedder()
    else:
        client = BackendClient.from_address(cfg.embedding_address, timeout=cfg.backend_timeout)
        emb = ExternalEmbedder(client, out / "work" / "embed", tag="external")
    path = cache_path(out, emb.tag, emb.dimension)
    if path.exists():
        warm = cache_read(path, emb.tag)
        if warm.dimension == emb.dimension:
            emb.cache = warm
    return emb, path


def _segmenter(cfg: PipelineConfig, out: Path):
    if cfg.segmentation_backend == "mock":
        return MockSegmenter(cfg.mock_tol)
    client = BackendClient.from_address(cfg.segmentation_address, timeout=cfg.backend_timeout)
    return ExternalSegmenter(client, out / "work" / "segment")


def run_selection(cfg: PipelineConfig, samples: list[_Sample], embedder) -> SelectionResult:
    embs = [embedder.embed(s.id, s.image) for s in samples]
    ids = [s.id for s in samples]
    if cfg.support_ids is not None:
        missing = set(cfg.support_ids) - set(ids)
        if missing:
            raise PipelineError(f"configured support ids not in dataset: {sorted(missing)}")
        return fixed_support(embs, cfg.support_ids)
    if cfg.toggles.ES:
        return select_support(embs, cfg.K)
    # without example selection the support set is the first K ids in order
    return fixed_support(embs, sorted(ids)[:cfg.K])


def _process_query(cfg, query: _Sample, support: _Sample, segmenter, out: Path) -> QueryRecord:
    rec = QueryRecord(query.id, support.id)
    t0 = time.perf_counter()
    field = register(support.gray, query.gray, cfg.registration)
    write_field(field, out / "fields" / f"{query.id}.mpad")
    coarse_soft = propagate_mask(support.mask, field)
    coarse = coarse_soft.threshold(0.5)
    save_mask(coarse, out / "coarse" / f"{query.id}.png")
    t1 = time.perf_counter()
    rec.timings["register"] = t1 - t0
    if query.mask is not None:
        rec.coarse_dice = dice(coarse, query.mask)
    final = coarse
    rec.fallback_flag = not coarse.any()
    if cfg.toggles.PA:
        prompts = generate_prompts(coarse_soft, cfg.prompt.expand_margin, cfg.prompt.soften_scale)
        rec.fallback_flag = prompts.fallback_flag
        prompts.save(out / "prompts" / f"{query.id}.json")
        t2 = time.perf_counter()
        rec.timings["prompt"] = t2 - t1
        req = SegmentationRequest(query.id, query.image, prompts)
        result = segmenter.segment(req)
        if cfg.toggles.PR:
            result = refine(segmenter, query.image, prompts, result, cfg.refinement_rounds,
                            sample_id=query.id, soften_scale=cfg.prompt.soften_scale)
        rec.rounds = result.round
        rec.warning = result.warning
        final = result.mask
        rec.timings["segment"] = time.perf_counter() - t2
    save_mask(final, out / "predictions" / f"{query.id}.png")
    if query.mask is not None:
        rec.final_dice = dice(final, query.mask)
    return rec


def run(cfg: PipelineConfig) -> RunReport:
    """Execute every enabled stage and write artifacts plus the report under ``output_dir``.

    A query that fails is recorded with its error and the batch carries on;
    an unreadable dataset or unreachable backend raises :class:`PipelineError`.
    """
    cfg.validate()
    out = cfg.output_dir
    for sub in ("fields", "coarse", "prompts", "predictions"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    t_start = time.perf_counter()
    samples = _load_samples(cfg)
    cfg.validate(len(samples))
    by_id = {s.id: s for s in samples}

    stage = {}
    embedder = segmenter = None
    try:
        t = time.perf_counter()
        try:
            embedder, emb_path = _embedder(cfg, out)
            selection = run_selection(cfg, samples, embedder)
        except (BackendError, EmbeddingError) as exc:
            raise PipelineError(f"embedding stage failed: {exc}") from exc
        cache_write(embedder.cache, emb_path)
        (out / "selection.json").write_text(selection.to_json([s.id for s in samples]))
        stage["select"] = time.perf_counter() - t

        for sid in selection.support_ids:
            if by_id[sid].mask is None:
                raise PipelineError(f"support sample {sid} has no mask")

        if cfg.toggles.PA:
            try:
                segmenter = _segmenter(cfg, out)
            except BackendError as exc:
                raise PipelineError(f"segmentation backend unavailable: {exc}") from exc

        queries = sorted(selection.assignment)

        def job(qid):
            support = by_id[selection.assignment[qid]]
            try:
                return _process_query(cfg, by_id[qid], support, segmenter, out)
            except Exception as exc:  # noqa: BLE001 - per-query failures never abort the batch
                log.exception("query %s failed", qid)
                return QueryRecord(qid, support.id, error=f"{type(exc).__name__}: {exc}")

        t = time.perf_counter()
        if cfg.workers == 1:
            records = [job(q) for q in queries]
        else:
            with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
                records = list(pool.map(job, queries))
        stage["queries"] = time.perf_counter() - t
    finally:
        for b in (embedder, segmenter):
            client = getattr(b, "client", None)
            if client is not None:
                client.close()

    records.sort(key=lambda r: r.query_id)
    for key in ("register", "prompt", "segment"):
        stage[key] = sum(r.timings.get(key, 0.0) for r in records)
    stage["total"] = time.perf_counter() - t_start

    manifest = {
        "tool": "sammpa",
        "version": __version__,
        "kernel_backend": _kernels.BACKEND,
        "config": cfg.to_dict(),
        "toggles": cfg.toggles.label(),
        "support_ids": list(selection.support_ids),
        "selection_objective": selection.objective,
        "inputs": {s.id: {"image": _sha256(s.image_path),
                          "mask": _sha256(s.mask_path) if s.mask_path else None}
                   for s in samples},
    }
    report = RunReport(records, aggregate(records, stage), manifest)
    report.save(out)
    return report
