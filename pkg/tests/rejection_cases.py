"""Nine trajectories over the toy repo spanning jaccard {<, =, >} 0.6 × patch {dissimilar, similar, none}.

Ground truth from the gold patch is {resize.py, Resizer, Resizer.scale, chunk [16-22]}.
"""

from __future__ import annotations

from swesyn.agent.core import LOCALIZATION_ONLY, PATCH_PRODUCED, Trajectory
from swesyn.metrics import FaultLocation, FaultLocationSet
from swesyn.patch_engine import Edit, EditPatch, render_diff

SCALE_LINE = "return (int(width * self.factor), int(height * self.factor))"
FIT_RETURN = "return (clamp(width, 1, bound), clamp(height, 1, bound))"
GOLD_ADDED = "return (round(width * self.factor), round(height * self.factor))"
CROP_RETURN = "return (right - left, bottom - top)"

F, C, FN, CH = FaultLocation.file_, FaultLocation.class_, FaultLocation.function, FaultLocation.chunk


def _diff(snapshot, path, original, replacement):
    return render_diff(EditPatch.of(Edit(path, original, replacement)), snapshot).text


def cases(snapshot):
    """[(name, trajectory, expected decision)]."""
    # edits to Resizer.fit share file, class and an overlapping chunk with the
    # truth but not the function: 3 / 5 = 0.6 exactly
    patches = {
        ("lt", "dissimilar"): _diff(snapshot, "src/crop.py", CROP_RETURN, "return None"),
        ("lt", "similar"): _diff(snapshot, "src/crop.py", CROP_RETURN, GOLD_ADDED),
        ("eq", "dissimilar"): _diff(snapshot, "src/resize.py", FIT_RETURN, "return None"),
        ("eq", "similar"): _diff(snapshot, "src/resize.py", FIT_RETURN, GOLD_ADDED),
        ("gt", "dissimilar"): _diff(snapshot, "src/resize.py", SCALE_LINE, "return None"),
        ("gt", "similar"): _diff(snapshot, "src/resize.py", SCALE_LINE, GOLD_ADDED),
    }
    terminal = {
        "lt": FaultLocationSet([F("src/crop.py"), FN("src/crop.py", "crop_box")]),
        "eq": FaultLocationSet([F("src/resize.py"), C("src/resize.py", "Resizer"),
                                FN("src/resize.py", "Resizer.fit"), CH("src/resize.py", 16, 22)]),
        "gt": FaultLocationSet([F("src/resize.py"), C("src/resize.py", "Resizer"),
                                FN("src/resize.py", "Resizer.scale"), CH("src/resize.py", 17, 21)]),
    }
    expected = {
        "lt": {"dissimilar": "drop", "similar": "drop", "none": "drop"},
        "eq": {"dissimilar": "keep_localization_only", "similar": "keep_full",
               "none": "keep_localization_only"},
        "gt": {"dissimilar": "keep_localization_only", "similar": "keep_full",
               "none": "keep_localization_only"},
    }
    out = []
    for band in ("lt", "eq", "gt"):
        for kind in ("dissimilar", "similar", "none"):
            if kind == "none":
                traj = Trajectory(f"toy-{band}-{kind}", outcome=LOCALIZATION_ONLY,
                                  predicted_locations=terminal[band])
            else:
                traj = Trajectory(f"toy-{band}-{kind}", outcome=PATCH_PRODUCED,
                                  final_patch=patches[(band, kind)],
                                  predicted_locations=terminal[band])
            out.append((f"{band}/{kind}", traj, expected[band][kind]))
    return out
