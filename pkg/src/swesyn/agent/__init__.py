from .actions import Action, ParseDiagnostic, parse_model_action, parse_reply
from .backends import (BackendError, BackendUnavailable, CallKey, HttpChatBackend, RecordingBackend,
                       ReplayDigestMismatch, ReplayExhausted, ScriptedReplayBackend, TransportError,
                       complete, prompt_digest)
from .core import (FAILED, FAULT_LOCALIZATION, LOCALIZATION_ONLY, PATCH_GENERATION, PATCH_PRODUCED,
                   REPO_UNDERSTANDING, STAGES, AgentConfig, TaskInstance, Trajectory, TrajectoryStep,
                   UnderstandingResult, read_trajectory_steps, run_task, stage_fault_localization,
                   stage_patch_generation, stage_repo_understanding, write_trajectory)
