"""Drivers that assemble the role machines of one protocol run and execute them on a transport."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from ..batch import unfold_batchwise
from ..errors import IllConditionedProjectionError, InvalidInputError, SessionAborted
from ..transport.bus import run_bus
from ..transport.wire import Transcript
from .inference import (
    HolderMonitoring,
    IncompleteAuthority,
    IncompleteHolder,
    IncompleteServer,
    InferenceAuthority,
    InferenceHolder,
    InferenceServer,
)
from .roles import HolderModelShare, Party, SessionConfig
from .training import TrainingAuthority, TrainingHolder, TrainingServer

Runner = Callable[[list[Party], int], Transcript]


def _bus(parties: list[Party], seed: int) -> Transcript:
    return run_bus(parties, seed)


def run_id(config: SessionConfig, protocol: str, run: int | str = 0) -> str:
    return f"{config.session_id}:{protocol}:{run}"


def _bus_seed(config: SessionConfig) -> int:
    return int(config.seeds.get("bus", config.seeds.get("master", 0)))


def training_parties(config: SessionConfig, local_data: Sequence, variable_names=None, run: int | str = 0) -> list[Party]:
    if len(local_data) != config.g:
        raise InvalidInputError(f"expected data for {config.g} holders, got {len(local_data)}")
    rid = run_id(config, "train", run)
    parties: list[Party] = [TrainingAuthority(config, rid), TrainingServer(config, rid)]
    for i, x in enumerate(local_data, start=1):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 3:
            x = unfold_batchwise(x).matrix
        names = variable_names[i - 1] if variable_names is not None else None
        parties.append(TrainingHolder(config, rid, i, x, names))
    return parties


def fed_train(
    config: SessionConfig,
    local_data: Sequence,
    *,
    variable_names: Sequence[Sequence[str]] | None = None,
    runner: Runner = _bus,
    run: int | str = 0,
) -> tuple[list[HolderModelShare], Transcript]:
    """Federated model fitting; returns each holder's share and the session transcript.

    ``local_data[i]`` is holder ``i+1``'s raw ``m x n_i`` block (or its
    ``I x J_i x K_i`` batch tensor, unfolded locally).
    """
    parties = training_parties(config, local_data, variable_names, run)
    transcript = runner(parties, _bus_seed(config))
    return [p.share for p in parties if isinstance(p, TrainingHolder)], transcript


def inference_parties(config, samples, shares, sample_ids=None, run: int | str = 0) -> list[Party]:
    if len(samples) != config.g or len(shares) != config.g:
        raise InvalidInputError(f"expected samples and shares for {config.g} holders")
    blocks = [np.atleast_2d(np.asarray(x, dtype=np.float64)) for x in samples]
    s = blocks[0].shape[0]
    if any(b.shape[0] != s for b in blocks):
        raise InvalidInputError("all holders must submit the same number of samples")
    ids = list(range(s)) if sample_ids is None else [int(i) for i in sample_ids]
    rid = run_id(config, "infer", run)
    parties: list[Party] = [InferenceAuthority(config, rid, ids), InferenceServer(config, rid, s)]
    for share, x in zip(shares, blocks):
        parties.append(InferenceHolder(config, rid, share, x, ids))
    return parties


def fed_infer(
    config: SessionConfig,
    samples: Sequence,
    shares: Sequence[HolderModelShare],
    *,
    sample_ids: Sequence[int] | None = None,
    runner: Runner = _bus,
    run: int | str = 0,
) -> tuple[list[HolderMonitoring], Transcript]:
    """Federated monitoring of complete samples.

    ``samples[i]`` holds holder ``i+1``'s raw columns for the same sample
    rows (one row per sample, or a single vector).
    """
    parties = inference_parties(config, samples, shares, sample_ids, run)
    transcript = runner(parties, _bus_seed(config))
    return [p.result for p in parties if isinstance(p, InferenceHolder)], transcript


def incomplete_parties(config, partial_samples, shares, k, sample_ids=None, run: int | str = 0) -> list[Party]:
    active = len(partial_samples)
    if not 1 <= active <= config.g or len(shares) != config.g:
        raise InvalidInputError("need 1..g partial sample blocks and one share per holder")
    blocks = [np.atleast_2d(np.asarray(x, dtype=np.float64)) for x in partial_samples]
    s = blocks[0].shape[0]
    if any(b.shape[0] != s for b in blocks):
        raise InvalidInputError("all holders must submit the same number of samples")
    ids = list(range(s)) if sample_ids is None else [int(i) for i in sample_ids]
    r = shares[0].n_components
    rid = run_id(config, "incomplete", run)
    parties: list[Party] = [
        IncompleteAuthority(config, rid, ids, r, active, int(k)),
        IncompleteServer(config, rid, s, active),
    ]
    for share in shares:
        x = blocks[share.index - 1] if share.index <= active else None
        parties.append(IncompleteHolder(config, rid, share, x, ids))
    return parties


def fed_score_incomplete(
    config: SessionConfig,
    partial_samples: Sequence,
    shares: Sequence[HolderModelShare],
    k: int,
    *,
    sample_ids: Sequence[int] | None = None,
    runner: Runner = _bus,
    run: int | str = 0,
) -> tuple[np.ndarray, Transcript]:
    """Scores of an in-progress batch.

    ``partial_samples`` covers holders ``1..i``: complete blocks for holders
    before ``i`` and the first ``k * J_i`` unfolded columns for holder ``i``.
    Every holder ends up with the same scores; holder 1's copy is returned.
    """
    parties = incomplete_parties(config, partial_samples, shares, k, sample_ids, run)
    try:
        transcript = runner(parties, _bus_seed(config))
    except SessionAborted as exc:
        if isinstance(exc.cause, IllConditionedProjectionError):
            exc.cause.k = int(k)
            raise exc.cause from exc
        raise
    holders = [p for p in parties if isinstance(p, IncompleteHolder)]
    return holders[0].scores, transcript
