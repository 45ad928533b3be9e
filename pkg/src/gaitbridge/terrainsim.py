"""Deterministic 2-D runner simulator with terrain artifacts.

The runner is a point body on a leg. In contact it drives horizontally and
crouches; releasing a deep crouch (a2 <= -0.5 while c >= 0.5) launches it with
vertical speed 6*c*|a2|. Flight integrates constant gravity with the exact
ballistic step so measured jump apexes match w0^2/(2g) to well under a
millimeter. All state advances at a fixed 60 Hz.

Units are meters/seconds throughout. Action components are clipped to [-1, 1]:
a1 drives (forward/brake), a2 moves the crouch (positive deepens; a strong
negative release while crouched triggers the jump).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

DT = 1.0 / 60.0          # control and physics step, s
V_MAX = 2.0              # ground speed clamp, m/s
DRIVE_GAIN = 4.0         # horizontal force per unit a1, m/s^2
DRAG = 1.5               # passive speed decay in contact, 1/s
CROUCH_RATE = 4.0        # crouch change per unit a2, 1/s
STAND_HEIGHT = 1.0       # leg length fully extended, m
CROUCH_DEPTH = 0.4       # fraction of leg folded at c=1
JUMP_GAIN = 6.0          # takeoff speed per unit crouch*|a2|, m/s
JUMP_MIN_CROUCH = 0.5
JUMP_TRIGGER_A2 = -0.5
GRAVITY = 9.81           # m/s^2
STEP_UP_LIMIT = 0.15     # max walkable terrain rise per step, m
MAX_STEPS = 900          # episode timeout
PROGRESS_GAIN = 20.0     # reward per meter of forward progress
ALIVE_BONUS = 0.05
FAILURE_PENALTY = 10.0
GOAL_BONUS = 10.0
SPAWN_MAX_X = 2.2        # reset draws x0 ~ U(0, SPAWN_MAX_X)
DETECT_RANGE = 1.0       # oracle fires within this distance of an artifact
OBS_DIM = 10
OBS_PROPRIO = 5          # body-only observation prefix: v, w, height, crouch, contact
GOAL_CLEARANCE = 3.0     # goal sits this far past the last artifact

BLOCK = "block"
GAP = "gap"
HURDLE = "hurdle"
KINDS = (BLOCK, GAP, HURDLE)

# per-kind default geometry: (height, length)
DEFAULT_GEOMETRY = {
    BLOCK: (0.5, 0.3),
    GAP: (0.0, 0.8),
    HURDLE: (0.2, 0.1),
}

FAIL_COLLISION = "collision"
FAIL_GAP = "fell_in_gap"
FAIL_TIMEOUT = "timeout"


class CourseError(ValueError):
    pass


@dataclass(frozen=True)
class Artifact:
    kind: str
    start: float
    height: float
    length: float

    @property
    def end(self):
        return self.start + self.length


def make_artifact(kind, start, height=None, length=None):
    if kind not in KINDS:
        raise CourseError(f"unknown artifact kind {kind!r}")
    dh, dl = DEFAULT_GEOMETRY[kind]
    return Artifact(kind, float(start), dh if height is None else float(height),
                    dl if length is None else float(length))


@dataclass(frozen=True)
class Course:
    artifacts: tuple
    goal_x: float

    def validate(self):
        prev_end = None
        for art in self.artifacts:
            if art.length <= 0:
                raise CourseError(f"artifact at {art.start} has non-positive length")
            if prev_end is not None and art.start < prev_end:
                raise CourseError(f"artifact at {art.start} overlaps the previous one")
            prev_end = art.end
        if self.artifacts:
            first = self.artifacts[0]
            if first.start < SPAWN_MAX_X:
                raise CourseError(
                    f"first artifact starts at {first.start}, inside the spawn region "
                    f"(must be >= {SPAWN_MAX_X})")
            if self.goal_x < self.artifacts[-1].end:
                raise CourseError("goal before the last artifact")
        if self.goal_x <= 0:
            raise CourseError("goal must be positive")
        return self


def make_course(artifacts, goal_x=None):
    artifacts = tuple(sorted(artifacts, key=lambda a: a.start))
    if goal_x is None:
        if not artifacts:
            raise CourseError("a course with no artifacts needs an explicit goal")
        goal_x = artifacts[-1].end + GOAL_CLEARANCE
    return Course(artifacts, float(goal_x)).validate()


def flat_course(length=6.0):
    return make_course((), goal_x=length)


def single_artifact_course(kind, start=3.2, height=None, length=None):
    return make_course((make_artifact(kind, start, height, length),))


def multi_terrain_course(order, first_start=3.2, separation=3.0):
    """One artifact of each kind in the given order, flat separators between."""
    if sorted(order) != sorted(KINDS):
        raise CourseError(f"order must be a permutation of {KINDS}, got {order!r}")
    artifacts = []
    x = first_start
    for kind in order:
        art = make_artifact(kind, x)
        artifacts.append(art)
        x = art.end + separation
    return make_course(artifacts)


# ---- course files -----------------------------------------------------------

_OVERRIDE_KEYS = {"height", "length", "width"}


def parse_course_text(text, name="<course>"):
    """Parse the line-based course format.

    Each non-empty, non-comment line is either ``<kind> <start> [key=value...]``
    with kind in {block, gap, hurdle} and optional height=/length=/width=
    overrides (width is an alias for length), or ``goal <x>``.
    """
    artifacts = []
    goal_x = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        head = parts[0].lower()
        if head == "goal":
            if goal_x is not None:
                raise CourseError(f"{name}:{lineno}: duplicate goal line")
            if len(parts) != 2:
                raise CourseError(f"{name}:{lineno}: goal takes exactly one value")
            try:
                goal_x = float(parts[1])
            except ValueError:
                raise CourseError(f"{name}:{lineno}: goal value {parts[1]!r} is not a number") from None
            continue
        if head not in KINDS:
            raise CourseError(f"{name}:{lineno}: unknown artifact kind {parts[0]!r}")
        if len(parts) < 2:
            raise CourseError(f"{name}:{lineno}: {head} needs a start position")
        try:
            start = float(parts[1])
        except ValueError:
            raise CourseError(f"{name}:{lineno}: start {parts[1]!r} is not a number") from None
        height = length = None
        for token in parts[2:]:
            if "=" not in token:
                raise CourseError(f"{name}:{lineno}: expected key=value, got {token!r}")
            key, _, value = token.partition("=")
            if key not in _OVERRIDE_KEYS:
                raise CourseError(f"{name}:{lineno}: unknown override {key!r}")
            try:
                fval = float(value)
            except ValueError:
                raise CourseError(f"{name}:{lineno}: {key} value {value!r} is not a number") from None
            if key == "height":
                height = fval
            else:
                length = fval
        artifacts.append(make_artifact(head, start, height, length))
    try:
        return make_course(artifacts, goal_x)
    except CourseError as exc:
        raise CourseError(f"{name}: {exc}") from None


def load_course(path):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise CourseError(f"cannot read course file {path}: {exc}") from None
    return parse_course_text(text, name=str(path))


# ---- terrain queries --------------------------------------------------------

def surface_at(course, x):
    """(support height, is_gap) under coordinate x. Gaps report height 0."""
    for art in course.artifacts:
        if art.start <= x < art.end:
            if art.kind == GAP:
                return 0.0, True
            return art.height, False
        if x < art.start:
            break
    return 0.0, False


def next_artifact(course, x):
    """First artifact not yet traversed (its end is still ahead of x)."""
    for art in course.artifacts:
        if x <= art.end:
            return art
    return None


def leg_length(c):
    return STAND_HEIGHT * (1.0 - CROUCH_DEPTH * c)


# ---- state ------------------------------------------------------------------

@dataclass
class RunnerState:
    x: float = 0.0
    v: float = 0.0
    w: float = 0.0
    h: float = STAND_HEIGHT
    c: float = 0.0
    contact: bool = True
    steps: int = 0
    done: bool = False
    success: bool = False
    failure: str = None
    max_x: float = 0.0

    def clone(self):
        return replace(self)


KIND_ONE_HOT = {BLOCK: 0, GAP: 1, HURDLE: 2}


def observe(course, state):
    """10-component observation vector (float64)."""
    obs = np.zeros(OBS_DIM)
    obs[0] = state.v
    obs[1] = state.w
    support, _ = surface_at(course, state.x)
    obs[2] = state.h - support
    obs[3] = state.c
    obs[4] = 1.0 if state.contact else 0.0
    art = next_artifact(course, state.x)
    if art is None:
        obs[5] = 2.0
    else:
        obs[5] = min(max(art.start - state.x, 0.0), 2.0)
        obs[6] = art.height
        obs[7 + KIND_ONE_HOT[art.kind]] = 1.0
    return obs


def oracle_detect(course, state):
    """(detected, artifact): fires within DETECT_RANGE of the next artifact."""
    art = next_artifact(course, state.x)
    if art is None:
        return False, None
    if art.start - state.x <= DETECT_RANGE:
        return True, art
    return False, None


class TerrainEnv:
    """Steps RunnerState through the course. Mutates the state it is given."""

    def __init__(self, course):
        self.course = course.validate()

    def reset(self, rng):
        x0 = float(rng.uniform(0.0, SPAWN_MAX_X))
        support, _ = surface_at(self.course, x0)
        return RunnerState(x=x0, h=support + STAND_HEIGHT, max_x=x0)

    def reset_from(self, x, v=0.0, c=0.0):
        """Deterministic spawn used by per-kind initial-state distributions."""
        support, is_gap = surface_at(self.course, x)
        if is_gap:
            raise CourseError(f"cannot spawn in contact over a gap at x={x}")
        return RunnerState(x=x, v=v, c=c, h=support + leg_length(c), max_x=x)

    def step(self, state, action):
        """Advance one tick. Returns (reward, done)."""
        if state.done:
            raise RuntimeError("step on a finished episode")
        a1 = min(max(float(action[0]), -1.0), 1.0)
        a2 = min(max(float(action[1]), -1.0), 1.0)
        x_old = state.x
        failure = None

        if state.contact:
            if state.c >= JUMP_MIN_CROUCH and a2 <= JUMP_TRIGGER_A2:
                # takeoff: crouch releases, leg pose freezes until landing
                state.w = JUMP_GAIN * state.c * abs(a2)
                state.contact = False
                failure = self._fly(state)
            else:
                support_old, _ = surface_at(self.course, state.x)
                state.v = min(max(state.v + (DRIVE_GAIN * a1 - DRAG * state.v) * DT, 0.0), V_MAX)
                state.c = min(max(state.c + CROUCH_RATE * a2 * DT, 0.0), 1.0)
                state.x += state.v * DT
                support_new, is_gap = surface_at(self.course, state.x)
                if is_gap:
                    failure = FAIL_GAP
                elif support_new - support_old > STEP_UP_LIMIT:
                    failure = FAIL_COLLISION
                else:
                    state.h = support_new + leg_length(state.c)
        else:
            failure = self._fly(state)

        state.steps += 1
        state.max_x = max(state.max_x, state.x)

        reward = PROGRESS_GAIN * (state.x - x_old)
        if failure is None and state.x >= self.course.goal_x:
            state.done = True
            state.success = True
            return reward + ALIVE_BONUS + GOAL_BONUS, True
        if failure is None and state.steps > MAX_STEPS:
            failure = FAIL_TIMEOUT
        if failure is not None:
            state.done = True
            state.failure = failure
            return reward - FAILURE_PENALTY, True
        return reward + ALIVE_BONUS, False

    def _fly(self, state):
        """One airborne tick: exact ballistic step, then landing/clip checks.

        Landing happens when the sole crosses down onto a support it was above
        before the step; crossing into a column it was already below means the
        runner hit the artifact's side.
        """
        leg = leg_length(state.c)
        prev_sole = state.h - leg
        state.x += state.v * DT
        state.h += state.w * DT - 0.5 * GRAVITY * DT * DT
        state.w -= GRAVITY * DT
        sole = state.h - leg
        support, is_gap = surface_at(self.course, state.x)
        if is_gap:
            if sole <= 0.0:
                return FAIL_GAP
            return None
        if sole <= support:
            if prev_sole >= support:
                state.h = support + leg
                state.w = 0.0
                state.contact = True
                return None
            return FAIL_COLLISION
        return None


def distance_fraction(course, state):
    return min(max(state.max_x / course.goal_x, 0.0), 1.0)


@dataclass
class EpisodeResult:
    success: bool
    steps: int
    max_x: float
    distance_fraction: float
    failure: str = None
    switch_count: int = 0
    reward_total: float = 0.0
