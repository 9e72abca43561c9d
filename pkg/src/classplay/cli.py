"""Command line front door: validate, simulate, serve, poke a server.

Commands that talk to a running server (rooms, restore) reach it over
the admin HTTP API; CLASSPLAY_LISTEN picks the default address for
those as well as for serve.
"""

from __future__ import annotations

import asyncio
import json
import os
import sys
import urllib.error
import urllib.request
from importlib import resources
from pathlib import Path

import click

from .engine import PHASES
from .scenario import (
    DuplicateIdError,
    Scenario,
    ScenarioReferenceError,
    ScenarioSyntaxError,
    load_scenario,
    validate_scenario,
)
from .server import ConfigError, ServerConfig, serve_forever
from .simharness import BotProfile, run_session
from .survey import SurveyFormatError, report as survey_report, score_csv

DEFAULT_LISTEN = "127.0.0.1:8437"


def _read_scenario(path: str | None) -> Scenario:
    if path is None:
        text = resources.files("classplay.scenarios").joinpath("sample_en.json").read_text("utf-8")
    else:
        text = Path(path).read_text("utf-8")
    try:
        return load_scenario(text)
    except (ScenarioSyntaxError, ScenarioReferenceError, DuplicateIdError) as exc:
        raise click.ClickException(f"scenario does not load: {exc}") from exc


def _listen_address(option: str | None) -> tuple[str, int]:
    raw = option or os.environ.get("CLASSPLAY_LISTEN") or DEFAULT_LISTEN
    host, _, port = raw.rpartition(":")
    if not host or not port.isdigit():
        raise click.ClickException(f"listen address '{raw}' must look like host:port")
    return host, int(port)


def _admin(listen: str | None, method: str, path: str, body: dict | None = None) -> dict:
    host, port = _listen_address(listen)
    data = None if body is None else json.dumps(body).encode("utf-8")
    request = urllib.request.Request(
        f"http://{host}:{port}{path}", data=data, method=method
    )
    try:
        with urllib.request.urlopen(request, timeout=10) as response:
            return json.loads(response.read())
    except urllib.error.HTTPError as exc:
        detail = exc.read().decode("utf-8", "replace").strip()
        raise click.ClickException(f"server said {exc.code}: {detail}")
    except OSError as exc:
        raise click.ClickException(f"cannot reach {host}:{port}: {exc}")


@click.group()
@click.version_option(package_name="classplay")
def main() -> None:
    """Host and study co-located AR classroom sessions."""


@main.command()
@click.argument("scenario_file", type=click.Path(exists=True, dir_okay=False))
def validate(scenario_file: str) -> None:
    """Check a scenario file; exit 0 only when it is playable."""
    try:
        scenario = load_scenario(Path(scenario_file).read_text("utf-8"))
    except (ScenarioSyntaxError, ScenarioReferenceError, DuplicateIdError) as exc:
        raise click.ClickException(str(exc))
    report = validate_scenario(scenario)
    for line in report.format_lines():
        click.echo(line)
    if report.ok:
        click.echo(f"OK {scenario.scenario_id}")
    sys.exit(0 if report.ok else 1)


def _parse_profiles(n_players: int, profile: tuple[str, ...], fault: tuple[str, ...]) -> list[BotProfile]:
    """Profile specs are kind[:count]; fault specs drop:Phase[:count[:rejoin_ms]].

    Deviants fill the roster from the back, so 'slow:2' slows the last
    two players and leaves the rest compliant.
    """
    profiles = [BotProfile() for _ in range(n_players)]
    cursor = n_players - 1

    def take(spec: str, count: int, make) -> None:
        nonlocal cursor
        for _ in range(count):
            if cursor < 0:
                raise click.BadParameter(f"'{spec}' needs more players than {n_players}")
            profiles[cursor] = make()
            cursor -= 1

    for spec in fault:
        parts = spec.split(":")
        if parts[0] != "drop" or len(parts) < 2 or len(parts) > 4:
            raise click.BadParameter(f"fault spec '{spec}' is not drop:Phase[:count[:rejoin_ms]]")
        phase = parts[1]
        if phase not in PHASES:
            raise click.BadParameter(f"unknown phase '{phase}' in '{spec}'")
        count = int(parts[2]) if len(parts) > 2 else 1
        rejoin = int(parts[3]) if len(parts) > 3 else 45_000
        take(spec, count, lambda: BotProfile("dropper", drop_phase=phase, rejoin_ms=rejoin))
    for spec in profile:
        kind, _, count_text = spec.partition(":")
        count = int(count_text) if count_text else 1
        if kind == "compliant":
            take(spec, count, BotProfile)
        elif kind == "slow":
            take(spec, count, lambda: BotProfile("slow", speed=3.0))
        elif kind == "wrong_scanner":
            take(spec, count, lambda: BotProfile("wrong_scanner"))
        else:
            raise click.BadParameter(f"unknown profile kind '{kind}'")
    return profiles


@main.command()
@click.option("--scenario", "scenario_file", type=click.Path(exists=True, dir_okay=False), default=None, help="Scenario file (default: bundled sample).")
@click.option("--players", type=click.IntRange(min=1), default=8, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--profile", multiple=True, help="Bot profile spec, kind[:count].")
@click.option("--fault", multiple=True, help="Fault spec, drop:Phase[:count[:rejoin_ms]].")
@click.option("--report", "report_file", type=click.Path(dir_okay=False, writable=True), default=None, help="Write the full run report as JSON.")
@click.option("--verify-checkpoints", is_flag=True, help="Replay every checkpoint against the live run.")
def sim(
    scenario_file: str | None,
    players: int,
    seed: int,
    profile: tuple[str, ...],
    fault: tuple[str, ...],
    report_file: str | None,
    verify_checkpoints: bool,
) -> None:
    """Run a full simulated session on the virtual clock."""
    scenario = _read_scenario(scenario_file)
    profiles = _parse_profiles(players, profile, fault)
    result = run_session(
        scenario, players, seed, profiles=profiles, verify_checkpoints=verify_checkpoints
    )
    summary = result.summary()
    if report_file is not None:
        Path(report_file).write_text(json.dumps(summary, indent=2) + "\n", "utf-8")
    status = "ok" if result.ok else "FAILED"
    click.echo(
        f"{status} phase={summary['final_phase']} events={summary['events']} "
        f"virtual_ms={summary['duration_ms']} digest={summary['digest']}"
    )
    for name, value in summary["invariants"].items():
        click.echo(f"  {name}: {'pass' if value else 'skipped' if value is None else 'FAIL'}")
    if not result.ok:
        if result.deadlock:
            click.echo(f"  deadlock: {result.blocking}", err=True)
        sys.exit(1)


@main.command()
@click.option("--config", "config_file", type=click.Path(exists=True, dir_okay=False), default=None, help="Server config JSON.")
def serve(config_file: str | None) -> None:
    """Run the session host until interrupted."""
    try:
        config = ServerConfig.load(config_file)
    except ConfigError as exc:
        raise click.ClickException(str(exc))
    click.echo(f"listening on {config.host}:{config.port}")
    if config.checkpoint_dir:
        click.echo(f"checkpoints under {config.checkpoint_dir}")
    try:
        asyncio.run(serve_forever(config))
    except KeyboardInterrupt:
        click.echo("bye")


@main.command()
@click.option("--listen", default=None, help="Admin address, host:port.")
def rooms(listen: str | None) -> None:
    """List the rooms of a running server."""
    doc = _admin(listen, "GET", "/rooms")
    if not doc["rooms"]:
        click.echo("no rooms")
        return
    for room in doc["rooms"]:
        click.echo(
            f"{room['join_code']}  {room['phase']:<20} "
            f"{len(room['connected'])}/{room['roster_size']} connected  "
            f"event_seq={room['event_seq']}"
        )


@main.command()
@click.argument("room")
@click.argument("checkpoint")
@click.option("--listen", default=None, help="Admin address, host:port.")
def restore(room: str, checkpoint: str, listen: str | None) -> None:
    """Roll a room back to a checkpoint ('latest' works)."""
    doc = _admin(listen, "POST", f"/rooms/{room}/restore", {"checkpoint": checkpoint})
    click.echo(f"restored {room} from {doc['restored']}")


@main.group()
def survey() -> None:
    """Score and summarize the post-session questionnaire."""


@survey.command()
@click.argument("csv_file", type=click.Path(exists=True, dir_okay=False))
@click.option("-o", "--output", type=click.Path(dir_okay=False, writable=True), default=None, help="Write scores here instead of stdout.")
def score(csv_file: str, output: str | None) -> None:
    """Per-respondent subscale and overall scores as CSV."""
    try:
        scored = score_csv(Path(csv_file).read_text("utf-8"))
    except SurveyFormatError as exc:
        raise click.ClickException(str(exc))
    if output is None:
        click.echo(scored, nl=False)
    else:
        Path(output).write_text(scored, "utf-8")


@survey.command(name="report")
@click.argument("csv_file", type=click.Path(exists=True, dir_okay=False))
def report_cmd(csv_file: str) -> None:
    """Descriptives, reliability and the sex comparison as JSON."""
    try:
        doc = survey_report(Path(csv_file).read_text("utf-8"))
    except SurveyFormatError as exc:
        raise click.ClickException(str(exc))
    click.echo(json.dumps(doc, indent=2))


if __name__ == "__main__":
    main()
