"""Orchestration engine for co-located classroom mystery sessions.

The package splits into a deterministic core and the plumbing around
it.  scenario loads and validates content files, engine advances one
session event by event, protocol frames messages for the wire, and
checkpoint freezes state to bytes.  On top of those sit server (the
asyncio host), simharness (bot-driven full sessions on a virtual
clock), survey (questionnaire scoring and statistics) and the CLI.
"""

from __future__ import annotations

from .checkpoint import (
    load_checkpoint_file,
    read_header,
    restore_checkpoint,
    save_checkpoint_file,
    write_checkpoint,
)
from .engine import (
    NoMatchingEntry,
    SessionState,
    bind_scenario,
    derive_pair_code,
    handle_event,
    new_session,
    resync_view,
)
from .protocol import Frame, FrameDecoder, decode_frame, encode_frame
from .scenario import Scenario, load_scenario, validate_scenario
from .server import ClassplayServer, ServerConfig
from .simharness import SessionDriver, replay_log, run_session, run_sweep
from .survey import cronbach_alpha, load_survey_csv, mann_whitney, score

__version__ = "0.1.0"

__all__ = [
    "ClassplayServer",
    "Frame",
    "FrameDecoder",
    "NoMatchingEntry",
    "Scenario",
    "ServerConfig",
    "SessionDriver",
    "SessionState",
    "bind_scenario",
    "cronbach_alpha",
    "decode_frame",
    "derive_pair_code",
    "encode_frame",
    "handle_event",
    "load_checkpoint_file",
    "load_scenario",
    "load_survey_csv",
    "mann_whitney",
    "new_session",
    "read_header",
    "replay_log",
    "restore_checkpoint",
    "resync_view",
    "run_session",
    "run_sweep",
    "save_checkpoint_file",
    "score",
    "validate_scenario",
    "write_checkpoint",
    "__version__",
]
