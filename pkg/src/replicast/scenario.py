"""Declarative scenario files: key-value lines plus timed fault blocks.

Example::

    # three-way replicated counter behind a single client
    seed 7
    mode semi_active
    loss 0.10
    latency 100 500
    duration 400ms
    group server gid=2 replicas=3 app=counter
    group client gid=1 replicas=1 app=workload requests=10 target=server period=8ms
    at 60ms crash server:0
    at 90ms partition server:1 | server:2 client:0
    at 150ms heal

Times accept `us`, `ms` and `s` suffixes (bare numbers are microseconds).
Group parameters other than the reserved ones are passed to the application.
"""

from __future__ import annotations

from .simnet import GroupSpec, SimConfig


class ScenarioError(Exception):
    pass


def parse_time(text: str) -> int:
    text = text.strip()
    for suffix, mul in (("us", 1), ("ms", 1000), ("s", 1_000_000)):
        if text.endswith(suffix):
            return int(float(text[:-len(suffix)]) * mul)
    return int(text)


_RESERVED = {"gid", "replicas", "app", "bootstrap", "period", "start",
             "events", "target", "stagger"}


def _parse_group(tokens, by_name) -> GroupSpec:
    name = tokens[0]
    kv = {}
    for tok in tokens[1:]:
        if "=" not in tok:
            raise ScenarioError("group option must be key=value: %r" % tok)
        k, v = tok.split("=", 1)
        kv[k] = v
    spec = GroupSpec(
        name=name,
        gid=int(kv.pop("gid")),
        replicas=int(kv.pop("replicas", "1")),
        app=kv.pop("app", "counter"),
        bootstrap=kv.pop("bootstrap", "established"),
    )
    if "period" in kv:
        spec.app_period_us = parse_time(kv.pop("period"))
    if "start" in kv:
        spec.app_start_us = parse_time(kv.pop("start"))
    if "stagger" in kv:
        spec.join_stagger_us = parse_time(kv.pop("stagger"))
    if "events" in kv:
        spec.app_events = int(kv.pop("events"))
    if "target" in kv:
        kv["target"] = kv["target"]          # resolved to a gid below
    spec.params = kv
    by_name[name] = spec
    return spec


def _resolve_targets(cfg: SimConfig, by_name):
    for g in cfg.groups:
        target = g.params.pop("target", None)
        if target is not None:
            if target not in by_name:
                raise ScenarioError("unknown target group %r" % target)
            g.params["target_gid"] = by_name[target].gid
        if g.app == "workload":
            requests = int(g.params.get("requests", 10))
            if not g.app_events:
                g.app_events = 2 * requests
        elif g.app == "taskdemo" and not g.app_events:
            g.app_events = int(g.params.get("steps", 40))


def _parse_fault(tokens):
    t = parse_time(tokens[0])
    action = tokens[1]
    if action == "crash":
        return (t, "crash", tokens[2])
    if action == "heal":
        return (t, "heal", None)
    if action == "partition":
        sides, side = [], []
        for tok in tokens[2:]:
            if tok == "|":
                sides.append(side)
                side = []
            else:
                side.append(tok)
        sides.append(side)
        if len(sides) < 2 or not all(sides):
            raise ScenarioError("partition needs at least two sides")
        return (t, "partition", sides)
    raise ScenarioError("unknown fault action %r" % action)


def parse(text: str) -> SimConfig:
    cfg = SimConfig()
    by_name = {}
    for lineno, raw_line in enumerate(text.splitlines(), 1):
        line = raw_line.split("#", 1)[0].strip()
        if not line:
            continue
        tokens = line.split()
        key = tokens[0]
        try:
            if key == "seed":
                cfg.seed = int(tokens[1])
            elif key == "mode":
                if tokens[1] not in ("semi_active", "semi_passive"):
                    raise ScenarioError("bad mode %r" % tokens[1])
                cfg.mode = tokens[1]
            elif key == "loss":
                cfg.loss = float(tokens[1])
            elif key == "latency":
                cfg.latency_us = (parse_time(tokens[1]), parse_time(tokens[2]))
            elif key == "duration":
                cfg.duration_us = parse_time(tokens[1])
            elif key == "budget":
                cfg.budget = int(tokens[1])
            elif key == "drain":
                cfg.drain = tokens[1].lower() in ("1", "true", "yes")
            elif key == "duplicates":
                cfg.duplicate_rate = float(tokens[1])
            elif key == "group":
                cfg.groups.append(_parse_group(tokens[1:], by_name))
            elif key == "at":
                cfg.faults.append(_parse_fault(tokens[1:]))
            else:
                raise ScenarioError("unknown directive %r" % key)
        except (IndexError, ValueError) as err:
            raise ScenarioError("line %d: %s" % (lineno, err)) from err
    if not cfg.groups:
        raise ScenarioError("scenario defines no groups")
    _resolve_targets(cfg, by_name)
    cfg.faults.sort(key=lambda f: f[0])
    return cfg


def load(path: str) -> SimConfig:
    with open(path) as f:
        return parse(f.read())
