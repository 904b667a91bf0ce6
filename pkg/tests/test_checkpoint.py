import math

import numpy as np
import pytest

from src.errors import ConfigError, MeshFormatError
from src.morphing.checkpoint import Checkpoint, checkpoint_name, latest_checkpoint, read_checkpoint, write_checkpoint
from src.morphing.optimizer import ContinuationState, MorphingOptimizer
from src.schemas.run_config import OptimizerConfig, RunConfig, parse_run_config


def test_checkpoint_keeps_state_bit_for_bit(tmp_path, rng):
    config = parse_run_config('{"seed": 7, "optimizer": {"r": 2, "c1": 0.25}}')
    displacements = rng.normal(scale=1e-3, size=(3, 11, 2))
    continuation = ContinuationState(c1=0.125, c2=math.inf, next_event="c2", c1_exhausted=True, since_event=3)
    path = write_checkpoint(tmp_path / checkpoint_name(12), Checkpoint(12, continuation, config, displacements))
    loaded = read_checkpoint(path)

    assert path.name == "checkpoint_00012.ckpt"
    assert loaded.iteration == 12
    assert loaded.continuation == continuation
    assert loaded.config == config
    assert np.array_equal(loaded.displacements, displacements)
    assert not path.with_suffix(".ckpt.tmp").exists()


def test_latest_checkpoint_picks_the_highest_iteration(tmp_path):
    config = RunConfig()
    state = ContinuationState(c1=1.0, c2=2.0)
    for iteration in (5, 40, 15):
        write_checkpoint(tmp_path / checkpoint_name(iteration), Checkpoint(iteration, state, config, np.zeros((1, 3, 2))))

    assert latest_checkpoint(tmp_path).name == "checkpoint_00040.ckpt"
    assert latest_checkpoint(tmp_path / "empty") is None


def test_corrupt_checkpoints_are_rejected(tmp_path):
    header_only = tmp_path / "bad.ckpt"
    header_only.write_text("MORPHCKPT v1\niteration 3\nc1 oops\n")
    bad_config = tmp_path / "config.ckpt"
    bad_config.write_text(
        "MORPHCKPT v1\niteration 3\nc1 1\nc2 inf\nnext_event c1\nc1_exhausted 0\nsince_event 2\nconfig {\"bogus\": 1}\n"
    )

    with pytest.raises(MeshFormatError):
        read_checkpoint(header_only)
    with pytest.raises(ConfigError, match="unknown key 'bogus'"):
        read_checkpoint(bad_config)


def test_resumed_run_continues_the_same_trajectory(small_toy, tmp_path):
    config = OptimizerConfig(max_iters=4)
    straight = MorphingOptimizer(small_toy, config).optimize()

    saved = {}

    def keep(iteration, displacements, continuation, step):
        if iteration == 2:
            saved["checkpoint"] = Checkpoint(
                iteration, continuation, RunConfig(optimizer=config), displacements.copy()
            )

    first = MorphingOptimizer(small_toy, OptimizerConfig(max_iters=2)).optimize(on_iteration=keep)
    path = write_checkpoint(tmp_path / checkpoint_name(2), saved["checkpoint"])
    checkpoint = read_checkpoint(path)
    resumed = MorphingOptimizer(small_toy, checkpoint.config.optimizer).optimize(
        initial=checkpoint.displacements,
        continuation=checkpoint.continuation,
        start_iteration=checkpoint.iteration,
        trace=first.trace,
    )

    assert resumed.iterations == 4
    assert [record.iteration for record in resumed.trace.records] == [1, 2, 3, 4]
    assert np.allclose(resumed.family.displacements, straight.family.displacements, atol=1e-12)
