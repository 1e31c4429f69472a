"""
Trajectory prediction for inserted objects: a remote JSON service that is
asked with the initial pose, the sky direction and a free-text description,
and a deterministic offline fallback that understands a small grammar.
"""
import json
import logging
import re

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
import requests

from cgs.api.core import (BadTrajectory, MalformedResponse, ParseError, ServiceUnreachable, UnparseableDescription,
                          dataclass_from_dict)


MODE_FALLBACK = "fallback"
MODE_REMOTE = "remote"
MODES = [MODE_FALLBACK, MODE_REMOTE]

DEFAULT_STEPS = 8

LANE_WIDTH = 3.5
""" lateral offset of a lane change (meters) """

DESCRIPTION_PATTERN = re.compile(
    r"^\s*(straight|turn_left|turn_right|lane_change)\s+([0-9]*\.?[0-9]+)\s*m/s(?:\s+over\s+([0-9]+)\s+steps?)?\s*$",
    re.IGNORECASE)


_logger = None


def logger() -> logging.Logger:
    """
    Return the logger to use.

    :return: the logger
    :rtype: logging.Logger
    """
    global _logger
    if _logger is None:
        _logger = logging.getLogger("cgs.api.trajectory")
    return _logger


def heading(yaw: float) -> np.ndarray:
    """
    Unit heading in the ground plane for a yaw about +y; yaw 0 is +x and
    positive yaw turns left.
    """
    return np.array([np.cos(yaw), 0.0, -np.sin(yaw)])


@dataclass
class Waypoint:
    timestep: int
    position: np.ndarray
    yaw: float

    def __post_init__(self):
        self.timestep = int(self.timestep)
        self.position = np.asarray(self.position, dtype=np.float64).reshape(3)
        self.yaw = float(self.yaw)

    def to_dict(self) -> Dict:
        return {"timestep": self.timestep, "position": [float(x) for x in self.position], "yaw": self.yaw}


def check_waypoints(waypoints: Sequence[Waypoint], error=BadTrajectory):
    """
    Raises the given error if the waypoints are empty, not strictly
    increasing in time or not finite.
    """
    if len(waypoints) == 0:
        raise error("Trajectory has no waypoints")
    times = [w.timestep for w in waypoints]
    if any(b <= a for a, b in zip(times[:-1], times[1:])):
        raise error("Waypoint timesteps must be strictly increasing: %s" % str(times))
    for w in waypoints:
        if not (np.all(np.isfinite(w.position)) and np.isfinite(w.yaw)):
            raise error("Non-finite waypoint at t=%d" % w.timestep)


def waypoints_from_list(items: Sequence, error=BadTrajectory) -> List[Waypoint]:
    """
    Parses [{timestep, position, yaw}] records.
    """
    result = []
    try:
        for item in items:
            result.append(Waypoint(item["timestep"], item["position"], item.get("yaw", 0.0)))
    except (KeyError, TypeError, ValueError, AttributeError) as e:
        raise error("Malformed waypoint list: %s" % str(e))
    check_waypoints(result, error=error)
    return result


@dataclass
class TrajectoryRequest:
    initial_position: np.ndarray
    initial_yaw: float = 0.0
    sky_direction: np.ndarray = field(default_factory=lambda: np.array([0.0, 1.0, 0.0]))
    description: str = ""
    t0: int = 0

    def __post_init__(self):
        self.initial_position = np.asarray(self.initial_position, dtype=np.float64).reshape(3)
        sky = np.asarray(self.sky_direction, dtype=np.float64).reshape(3)
        self.sky_direction = sky / np.linalg.norm(sky)

    def to_dict(self) -> Dict:
        return {
            "initial_pose": {"position": [float(x) for x in self.initial_position], "yaw": float(self.initial_yaw),
                             "timestep": int(self.t0)},
            "sky_direction": [float(x) for x in self.sky_direction],
            "description": self.description,
        }


@dataclass
class TrajectoryResponse:
    waypoints: List[Waypoint]

    def to_dict(self) -> Dict:
        return {"waypoints": [w.to_dict() for w in self.waypoints]}


def validate_response(request: TrajectoryRequest, response: TrajectoryResponse):
    """
    Checks the response against the request, raises MalformedResponse.
    """
    check_waypoints(response.waypoints, error=MalformedResponse)
    if response.waypoints[0].timestep != request.t0:
        raise MalformedResponse("First waypoint at t=%d, expected t=%d"
                                % (response.waypoints[0].timestep, request.t0))


class FallbackTrajectoryClient:
    """
    Offline predictor for descriptions of the form
    "straight|turn_left|turn_right|lane_change <speed> m/s [over <n> steps]".
    """

    def __init__(self, dt: float = 0.5, default_steps: int = DEFAULT_STEPS):
        self.dt = dt
        self.default_steps = default_steps

    def predict(self, request: TrajectoryRequest) -> TrajectoryResponse:
        p0 = request.initial_position
        yaw0 = float(request.initial_yaw)
        if request.description.strip() == "":
            return TrajectoryResponse([Waypoint(request.t0, p0, yaw0)])
        m = DESCRIPTION_PATTERN.match(request.description)
        if m is None:
            raise UnparseableDescription("Cannot parse trajectory description: '%s'" % request.description)
        maneuver = m.group(1).lower()
        speed = float(m.group(2))
        steps = int(m.group(3)) if m.group(3) is not None else self.default_steps
        if steps <= 0:
            raise UnparseableDescription("Number of steps must be positive: '%s'" % request.description)

        up = request.sky_direction
        fwd = heading(yaw0)
        fwd = fwd - (fwd @ up) * up
        fwd /= np.linalg.norm(fwd)
        left = np.cross(up, fwd)
        duration = steps * self.dt
        tau = np.arange(steps + 1) * self.dt

        if maneuver == "straight":
            along = speed * tau
            lateral = np.zeros_like(tau)
            yaw = np.full_like(tau, yaw0)
        elif maneuver in ("turn_left", "turn_right"):
            sign = 1.0 if maneuver == "turn_left" else -1.0
            omega = sign * 0.5 * np.pi / duration
            along = speed / omega * np.sin(omega * tau)
            lateral = speed / omega * (1.0 - np.cos(omega * tau))
            yaw = yaw0 + omega * tau
        else:
            along = speed * tau
            lateral = 0.5 * LANE_WIDTH * (1.0 - np.cos(np.pi * tau / duration))
            rate = 0.5 * LANE_WIDTH * np.pi / duration * np.sin(np.pi * tau / duration)
            yaw = yaw0 + np.arctan2(rate, speed) if speed > 0 else np.full_like(tau, yaw0)

        positions = p0 + along[:, None] * fwd + lateral[:, None] * left
        waypoints = [Waypoint(request.t0 + k, positions[k], yaw[k]) for k in range(steps + 1)]
        logger().info("Fallback trajectory '%s': %d waypoints" % (request.description, len(waypoints)))
        return TrajectoryResponse(waypoints)


class RemoteTrajectoryClient:
    """
    Queries an HTTP service that answers with {"waypoints": [...]} (or a bare
    list of waypoints).
    """

    def __init__(self, url: str, timeout: float = 30.0, retries: int = 2):
        self.url = url
        self.timeout = timeout
        self.retries = retries

    def predict(self, request: TrajectoryRequest) -> TrajectoryResponse:
        body = request.to_dict()
        r = None
        for attempt in range(self.retries + 1):
            try:
                logger().info("Requesting trajectory: %s" % self.url)
                r = requests.post(self.url, json=body, timeout=self.timeout)
                break
            except (requests.ConnectionError, requests.Timeout) as e:
                if attempt < self.retries:
                    logger().warning("Trajectory service failed (attempt %d of %d): %s"
                                     % (attempt + 1, self.retries + 1, str(e)))
                else:
                    raise ServiceUnreachable("Trajectory service unreachable: %s" % self.url)
        if r.status_code != 200:
            raise ServiceUnreachable("Trajectory service '%s' returned status code: %d" % (self.url, r.status_code))
        try:
            data = json.loads(r.text)
        except ValueError as e:
            raise MalformedResponse("Trajectory service returned invalid JSON: %s" % str(e))
        items = data.get("waypoints") if isinstance(data, dict) else data
        if not isinstance(items, list):
            raise MalformedResponse("Trajectory service response has no waypoint list")
        return TrajectoryResponse(waypoints_from_list(items, error=MalformedResponse))


@dataclass
class TrajectoryConfig:
    mode: str = MODE_FALLBACK
    url: Optional[str] = None
    timeout: float = 30.0
    retries: int = 2
    dt: float = 0.5

    def validate(self):
        if self.mode not in MODES:
            raise ParseError("trajectory: unknown mode '%s', available: %s" % (self.mode, ", ".join(MODES)))
        if (self.mode == MODE_REMOTE) and not self.url:
            raise ParseError("trajectory: remote mode requires 'url'")
        if (self.timeout <= 0) or (self.retries < 0) or (self.dt <= 0):
            raise ParseError("trajectory: timeout and dt must be positive, retries non-negative")

    @classmethod
    def from_dict(cls, d: Dict) -> "TrajectoryConfig":
        return dataclass_from_dict(cls, d, section="trajectory")


def make_client(cfg: TrajectoryConfig = None):
    """
    Instantiates the client configured in the options.

    :param cfg: the options, fallback if None
    :type cfg: TrajectoryConfig
    :return: the client
    """
    if cfg is None:
        cfg = TrajectoryConfig()
    if cfg.mode == MODE_REMOTE:
        return RemoteTrajectoryClient(cfg.url, timeout=cfg.timeout, retries=cfg.retries)
    return FallbackTrajectoryClient(dt=cfg.dt)


def predict_trajectory(request: TrajectoryRequest, client=None) -> TrajectoryResponse:
    """
    Asks the client for a trajectory and validates the answer.

    :param request: the initial pose, sky direction and description
    :type request: TrajectoryRequest
    :param client: the client to use, the offline fallback if None
    :return: the validated response
    :rtype: TrajectoryResponse
    """
    if client is None:
        client = FallbackTrajectoryClient()
    response = client.predict(request)
    validate_response(request, response)
    return response
