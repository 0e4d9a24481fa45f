"""Curating a human-deception benchmark from psychophysical trial logs.

Each trial shows a subject one image; the subject judges it real or
generated, gives a 1-4 realism rating (4 = certainly real), and the UI
records the response time. An image belongs in the hard benchmark when
humans found it convincing: either its aggregated realism rating is high,
or subjects hesitated far longer than typical before judging it.

Selection rule over generated images only:

    select x  iff  median_rating(x) >= tau_real
                   or mean_rt(x) > mu + sigma

where mu and sigma are the mean and population standard deviation of the
per-image mean response times (aggregated first, so an image shown many
times does not dominate the statistics). By default only generated images
enter mu/sigma; real images can be included with a flag when the study
design calls for a shared baseline.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractViolation, StoreError
from .store import GENERATED, REAL

RATING_MIN = 1
RATING_MAX = 4

COHORTS = ("lay", "cv_expert", "aigi_expert")


@dataclass(frozen=True)
class TrialRecord:
    """One completed trial: what was shown, what the subject did."""

    image_id: str
    ground_truth: int   # REAL or GENERATED, stamped by the server
    response: int       # subject's judgment, REAL or GENERATED
    rating: int         # 1..4 realism, 4 = certainly real
    rt_ms: float        # client-measured display-to-keypress time
    trial_id: str = ""
    session_id: str = ""
    participant_id: str = ""
    cohort: str = "lay"
    timestamp: float = 0.0  # server receive time, auditing only

    def __post_init__(self) -> None:
        if self.ground_truth not in (REAL, GENERATED):
            raise ContractViolation(f"bad ground_truth {self.ground_truth}")
        if self.response not in (REAL, GENERATED):
            raise ContractViolation(f"bad response {self.response}")
        if not (RATING_MIN <= self.rating <= RATING_MAX):
            raise ContractViolation(f"rating must be 1..4, got {self.rating}")
        if not (math.isfinite(self.rt_ms) and self.rt_ms > 0):
            raise ContractViolation(f"rt_ms must be positive, got {self.rt_ms}")
        if not self.image_id:
            raise ContractViolation("image_id must be non-empty")
        if self.cohort not in COHORTS:
            raise ContractViolation(f"unknown cohort tag {self.cohort!r}")


@dataclass(frozen=True)
class CurationConfig:
    tau_real: float = 4.0
    include_real_in_stats: bool = False
    cohort_filter: str | None = None

    def __post_init__(self) -> None:
        if self.tau_real not in (1.0, 2.0, 3.0, 4.0):
            raise ContractViolation(
                f"tau_real must be one of 1..4, got {self.tau_real}")
        if self.cohort_filter is not None and self.cohort_filter not in COHORTS:
            raise ContractViolation(f"unknown cohort tag {self.cohort_filter!r}")


@dataclass(frozen=True)
class ImageAggregate:
    image_id: str
    ground_truth: int
    n_trials: int
    median_rating: float
    mean_rt_ms: float


@dataclass
class CurationResult:
    selected_ids: list[str]
    mu_rt_ms: float
    sigma_rt_ms: float
    images: list[ImageAggregate] = field(default_factory=list)


def aggregate_trials(trials: list[TrialRecord]) -> list[ImageAggregate]:
    """Per-image median rating and mean response time, sorted by id."""
    by_image: dict[str, list[TrialRecord]] = {}
    for t in trials:
        by_image.setdefault(t.image_id, []).append(t)
    out = []
    for image_id in sorted(by_image):
        group = by_image[image_id]
        truths = {t.ground_truth for t in group}
        if len(truths) != 1:
            raise ContractViolation(
                f"image {image_id!r} appears with conflicting ground truth"
            )
        out.append(ImageAggregate(
            image_id=image_id,
            ground_truth=group[0].ground_truth,
            n_trials=len(group),
            median_rating=float(np.median([t.rating for t in group])),
            mean_rt_ms=float(np.mean([t.rt_ms for t in group])),
        ))
    return out


def curate(trials: list[TrialRecord],
           config: CurationConfig = CurationConfig()) -> CurationResult:
    """Select the generated images that held up against human judgment."""
    if config.cohort_filter is not None:
        trials = [t for t in trials if t.cohort == config.cohort_filter]
    images = aggregate_trials(trials)
    generated = [im for im in images if im.ground_truth == GENERATED]
    if not generated:
        raise ContractViolation("curation needs at least one generated image")

    stats_pool = images if config.include_real_in_stats else generated
    rts = np.array([im.mean_rt_ms for im in stats_pool], dtype=np.float64)
    mu = float(rts.mean())
    sigma = float(rts.std())  # population std: the pool is the population

    selected = [
        im.image_id for im in generated
        if im.median_rating >= config.tau_real or im.mean_rt_ms > mu + sigma
    ]
    return CurationResult(
        selected_ids=sorted(selected), mu_rt_ms=mu, sigma_rt_ms=sigma,
        images=images,
    )


@dataclass(frozen=True)
class CohortStats:
    n_trials: int
    accuracy: float      # fraction of trials where response == ground truth
    mean_rating: float
    mean_rt_ms: float


def cohort_report(trials: list[TrialRecord]) -> dict[str, CohortStats]:
    """Human performance per cohort, for comparison against the detector."""
    if not trials:
        raise ContractViolation("cohort_report needs at least one trial")
    report = {}
    for cohort in COHORTS:
        group = [t for t in trials if t.cohort == cohort]
        if not group:
            continue
        report[cohort] = CohortStats(
            n_trials=len(group),
            accuracy=float(np.mean(
                [t.response == t.ground_truth for t in group])),
            mean_rating=float(np.mean([t.rating for t in group])),
            mean_rt_ms=float(np.mean([t.rt_ms for t in group])),
        )
    return report


# ---------------------------------------------------------------------------
# Trial log files (JSON lines, append-friendly)
# ---------------------------------------------------------------------------


def trial_to_json(t: TrialRecord) -> str:
    return json.dumps({
        "image_id": t.image_id,
        "ground_truth": t.ground_truth,
        "response": t.response,
        "rating": t.rating,
        "rt_ms": t.rt_ms,
        "trial_id": t.trial_id,
        "session_id": t.session_id,
        "participant_id": t.participant_id,
        "cohort": t.cohort,
        "timestamp": t.timestamp,
    }, sort_keys=True, separators=(",", ":"))


def trial_from_json(line: str) -> TrialRecord:
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise StoreError(f"bad trial record line: {exc}") from exc
    return TrialRecord(
        image_id=obj["image_id"],
        ground_truth=int(obj["ground_truth"]),
        response=int(obj["response"]),
        rating=int(obj["rating"]),
        rt_ms=float(obj["rt_ms"]),
        trial_id=obj.get("trial_id", ""),
        session_id=obj.get("session_id", ""),
        participant_id=obj.get("participant_id", ""),
        cohort=obj.get("cohort", "lay"),
        timestamp=float(obj.get("timestamp", 0.0)),
    )


def write_trial_log(path: str | Path, trials: list[TrialRecord]) -> None:
    text = "".join(trial_to_json(t) + "\n" for t in trials)
    Path(path).write_text(text)


def append_trial(path: str | Path, trial: TrialRecord) -> None:
    with open(path, "a") as f:
        f.write(trial_to_json(trial) + "\n")


def read_trial_log(path: str | Path) -> list[TrialRecord]:
    out = []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            out.append(trial_from_json(line))
    return out
