"""Time loop shared by the simulation cases and the command line.

Wraps the stepper with an output schedule, checkpointing, and failure
capture.  Checkpoints carry every BDF history level, so a run resumed from
one replays the remaining steps exactly; to keep that replay bitwise the
loop drops lagged solver caches whenever it writes a checkpoint (a resumed
process necessarily starts without them).
"""

from dataclasses import dataclass, field
from typing import Callable, Optional

from .. import io
from ..stepper import StepFailure, TimeScheme, advance_step

__all__ = ["OutputSchedule", "time_loop", "resume_state"]


@dataclass
class OutputSchedule:
    """Every `every` accepted steps (0 disables; the final step always fires)."""

    every: int = 0
    on_output: Optional[Callable] = None   # on_output(step, t, state)
    checkpoint_path: Optional[str] = None

    def due(self, k, n_steps):
        if k == n_steps:
            return True
        return self.every > 0 and k % self.every == 0


def time_loop(ctx, state, dt, t_end, schedule: OutputSchedule = None,
              scheme: TimeScheme = None, manifest=None, progress=None):
    """Advance state to t_end; returns the scheme holding the final index.

    On StepFailure the last accepted state is checkpointed (when a path is
    configured) and the failure re-raised with the note recorded in the
    manifest.
    """
    schedule = schedule or OutputSchedule()
    scheme = scheme or TimeScheme(dt=dt)
    n_steps = int(round(t_end / dt))
    while scheme.k < n_steps:
        try:
            diag = advance_step(ctx, state, scheme)
        except StepFailure as exc:
            if schedule.checkpoint_path is not None:
                io.save_checkpoint(schedule.checkpoint_path, state, scheme.k,
                                   extra={"failed_step": scheme.k + 1})
            if manifest is not None:
                manifest.failure_notes.append(
                    f"step {scheme.k + 1}: {exc}")
                if schedule.checkpoint_path is not None:
                    manifest.add_output(schedule.checkpoint_path)
            raise
        if manifest is not None:
            manifest.record_step(diag)
        if progress is not None:
            progress(diag)
        if schedule.due(scheme.k, n_steps):
            if schedule.on_output is not None:
                schedule.on_output(scheme.k, scheme.k * dt, state)
            if schedule.checkpoint_path is not None:
                io.save_checkpoint(schedule.checkpoint_path, state, scheme.k)
                if manifest is not None:
                    manifest.add_output(schedule.checkpoint_path)
                ctx.reset_solver_cache()
    return scheme


def resume_state(checkpoint_path, dt):
    """Load a checkpoint into (state, scheme) ready for time_loop."""
    state, k, _rng, extra = io.load_checkpoint(checkpoint_path)
    scheme = TimeScheme(dt=dt)
    scheme.k = k
    return state, scheme, extra
