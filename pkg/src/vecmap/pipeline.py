"""Glue between streaming inference and evaluation."""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor

from .config import ExperimentConfig
from .evaluation import EvalReport, evaluate
from .queries import Mode
from .runtime import StreamResult, run_stream


def stream_sequences(model, sequences, cfg: ExperimentConfig, mode: Mode | None = None,
                     k_prev: int | None = None) -> list[StreamResult]:
    """Stream every sequence. ``mode=SINGLE_FRAME`` forces single-frame on all frames."""
    override = Mode.SINGLE_FRAME if mode is Mode.SINGLE_FRAME else None
    return [
        run_stream(model, seq, k_prev=k_prev, score_threshold=cfg.runtime.score_threshold,
                   output_threshold=cfg.runtime.eval_score_threshold, mode_override=override,
                   max_pose_jump=cfg.runtime.max_pose_jump)
        for seq in sequences
    ]


def report_for_streams(streams: list[StreamResult], sequences, cfg: ExperimentConfig) -> EvalReport:
    frames = []
    for res, seq in zip(streams, sequences):
        for out, f in zip(res.outputs, seq):
            frames.append((out, f.gt_elements))
    return evaluate(frames, cfg.eval)


def _eval_chunk(args):
    model, seqs, cfg, mode, k_prev = args
    return stream_sequences(model, seqs, cfg, mode, k_prev)


def evaluate_model(model, sequences, cfg: ExperimentConfig, mode: Mode | None = None,
                   k_prev: int | None = None, jobs: int = 1):
    """Stream and score. Returns (EvalReport, streams)."""
    if jobs > 1 and len(sequences) > 1:
        chunks = [sequences[i::jobs] for i in range(jobs)]
        with ProcessPoolExecutor(jobs) as ex:
            parts = list(ex.map(_eval_chunk, [(model, c, cfg, mode, k_prev) for c in chunks]))
        # restore original order
        streams = [None] * len(sequences)
        for ci, part in enumerate(parts):
            for j, r in enumerate(part):
                streams[ci + j * jobs] = r
    else:
        streams = stream_sequences(model, sequences, cfg, mode, k_prev)
    return report_for_streams(streams, sequences, cfg), streams
