import json

import numpy as np
import pytest
import requests

from cgs.api.core import MalformedResponse, ParseError, ServiceUnreachable, UnparseableDescription
from cgs.api.trajectory import (LANE_WIDTH, FallbackTrajectoryClient, RemoteTrajectoryClient, TrajectoryConfig,
                                TrajectoryRequest, make_client, predict_trajectory, waypoints_from_list)


class FakeResponse:

    def __init__(self, status_code=200, payload=None, text=None):
        self.status_code = status_code
        self.text = json.dumps(payload) if text is None else text


def positions(response):
    return np.stack([w.position for w in response.waypoints])


def test_straight_line():
    response = predict_trajectory(TrajectoryRequest([0.0, 0.0, 0.0], description="straight 5 m/s over 4 steps"))
    assert [w.timestep for w in response.waypoints] == [0, 1, 2, 3, 4]
    np.testing.assert_allclose(positions(response)[:, 0], [0.0, 2.5, 5.0, 7.5, 10.0])
    np.testing.assert_allclose(positions(response)[:, 1:], 0.0, atol=1e-12)


def test_straight_follows_yaw_and_t0():
    response = predict_trajectory(TrajectoryRequest([1.0, 0.0, 2.0], initial_yaw=np.pi / 2, t0=5,
                                                    description="straight 2 m/s over 2 steps"))
    assert response.waypoints[0].timestep == 5
    np.testing.assert_allclose(response.waypoints[-1].position, [1.0, 0.0, 0.0], atol=1e-12)


def test_turn_left_ends_perpendicular():
    response = predict_trajectory(TrajectoryRequest([0.0, 0.0, 0.0], description="turn_left 4 m/s over 6 steps"))
    last = response.waypoints[-1]
    assert last.yaw == pytest.approx(np.pi / 2)
    # a quarter circle: equal forward and sideways travel, the left side is -z
    assert last.position[0] == pytest.approx(-last.position[2])
    assert last.position[2] < 0


def test_turn_right_mirrors_left():
    left = predict_trajectory(TrajectoryRequest([0.0, 0.0, 0.0], description="turn_left 3 m/s"))
    right = predict_trajectory(TrajectoryRequest([0.0, 0.0, 0.0], description="turn_right 3 m/s"))
    np.testing.assert_allclose(positions(right) * [1.0, 1.0, -1.0], positions(left), atol=1e-12)


def test_lane_change():
    response = predict_trajectory(TrajectoryRequest([0.0, 0.0, 0.0], description="lane_change 10 m/s over 8 steps"))
    assert len(response.waypoints) == 9
    np.testing.assert_allclose(response.waypoints[-1].position, [40.0, 0.0, -LANE_WIDTH], atol=1e-9)
    assert response.waypoints[-1].yaw == pytest.approx(0.0, abs=1e-9)
    assert response.waypoints[4].yaw > 0


def test_empty_description_is_static():
    response = predict_trajectory(TrajectoryRequest([3.0, 0.0, 1.0], initial_yaw=0.4, t0=2))
    assert len(response.waypoints) == 1
    np.testing.assert_allclose(response.waypoints[0].position, [3.0, 0.0, 1.0])
    assert response.waypoints[0].timestep == 2


def test_unparseable_description():
    with pytest.raises(UnparseableDescription):
        FallbackTrajectoryClient().predict(TrajectoryRequest([0.0, 0.0, 0.0], description="fly to the moon"))
    with pytest.raises(UnparseableDescription):
        FallbackTrajectoryClient().predict(TrajectoryRequest([0.0, 0.0, 0.0], description="straight 5 m/s over 0 steps"))


def test_request_body():
    body = TrajectoryRequest([1.0, 2.0, 3.0], sky_direction=[0.0, 2.0, 0.0], description="straight 1 m/s").to_dict()
    assert body["sky_direction"] == [0.0, 1.0, 0.0]
    assert body["initial_pose"]["position"] == [1.0, 2.0, 3.0]
    assert body["description"] == "straight 1 m/s"


def test_remote_success(monkeypatch):
    calls = []

    def fake_post(url, json=None, timeout=None):
        calls.append((url, json))
        return FakeResponse(payload={"waypoints": [
            {"timestep": 0, "position": [0.0, 0.0, 0.0], "yaw": 0.0},
            {"timestep": 1, "position": [1.0, 0.0, 0.0], "yaw": 0.0}]})

    monkeypatch.setattr(requests, "post", fake_post)
    client = RemoteTrajectoryClient("http://localhost:9000/predict")
    response = predict_trajectory(TrajectoryRequest([0.0, 0.0, 0.0], description="go"), client=client)
    assert len(response.waypoints) == 2
    assert calls[0][0] == "http://localhost:9000/predict"
    assert calls[0][1]["description"] == "go"


def test_remote_bare_list(monkeypatch):
    monkeypatch.setattr(requests, "post", lambda url, json=None, timeout=None: FakeResponse(
        payload=[{"timestep": 0, "position": [0.0, 0.0, 0.0]}]))
    response = RemoteTrajectoryClient("http://x").predict(TrajectoryRequest([0.0, 0.0, 0.0]))
    assert response.waypoints[0].yaw == 0.0


def test_remote_decreasing_timesteps(monkeypatch):
    monkeypatch.setattr(requests, "post", lambda url, json=None, timeout=None: FakeResponse(payload={"waypoints": [
        {"timestep": 2, "position": [0.0, 0.0, 0.0]}, {"timestep": 1, "position": [1.0, 0.0, 0.0]}]}))
    with pytest.raises(MalformedResponse):
        RemoteTrajectoryClient("http://x").predict(TrajectoryRequest([0.0, 0.0, 0.0]))


def test_remote_wrong_start(monkeypatch):
    monkeypatch.setattr(requests, "post", lambda url, json=None, timeout=None: FakeResponse(payload={"waypoints": [
        {"timestep": 3, "position": [0.0, 0.0, 0.0]}]}))
    with pytest.raises(MalformedResponse):
        predict_trajectory(TrajectoryRequest([0.0, 0.0, 0.0]), client=RemoteTrajectoryClient("http://x"))


def test_remote_invalid_json(monkeypatch):
    monkeypatch.setattr(requests, "post", lambda url, json=None, timeout=None: FakeResponse(text="<html>"))
    with pytest.raises(MalformedResponse):
        RemoteTrajectoryClient("http://x").predict(TrajectoryRequest([0.0, 0.0, 0.0]))


def test_remote_status_error(monkeypatch):
    monkeypatch.setattr(requests, "post", lambda url, json=None, timeout=None: FakeResponse(status_code=500, text=""))
    with pytest.raises(ServiceUnreachable):
        RemoteTrajectoryClient("http://x").predict(TrajectoryRequest([0.0, 0.0, 0.0]))


def test_remote_connection_error_retries(monkeypatch):
    attempts = []

    def failing_post(url, json=None, timeout=None):
        attempts.append(url)
        raise requests.ConnectionError("refused")

    monkeypatch.setattr(requests, "post", failing_post)
    with pytest.raises(ServiceUnreachable):
        RemoteTrajectoryClient("http://x", retries=2).predict(TrajectoryRequest([0.0, 0.0, 0.0]))
    assert len(attempts) == 3


def test_waypoints_from_list_errors():
    with pytest.raises(MalformedResponse):
        waypoints_from_list([{"position": [0.0, 0.0, 0.0]}], error=MalformedResponse)
    with pytest.raises(MalformedResponse):
        waypoints_from_list([], error=MalformedResponse)
    with pytest.raises(MalformedResponse):
        waypoints_from_list([{"timestep": 0, "position": [np.nan, 0.0, 0.0]}], error=MalformedResponse)


def test_make_client():
    assert isinstance(make_client(), FallbackTrajectoryClient)
    cfg = TrajectoryConfig.from_dict({"mode": "remote", "url": "http://x", "retries": 0})
    client = make_client(cfg)
    assert isinstance(client, RemoteTrajectoryClient)
    assert client.retries == 0
    with pytest.raises(ParseError):
        TrajectoryConfig.from_dict({"mode": "remote"})
    with pytest.raises(ParseError):
        TrajectoryConfig.from_dict({"mode": "psychic"})
