#!/usr/bin/env python3
"""Smoke test for the `toolforge` Python extension module.

Builds nothing itself: it locates the compiled cdylib under target/ (run
`cargo build -p toolforge-py` first, or pass --lib <path>), copies it next
to a temp dir as `toolforge.so`, imports it, and exercises the main
operations end to end, including a full offline pipeline run.
"""

import argparse
import json
import pathlib
import shutil
import sys
import tempfile

REPO = pathlib.Path(__file__).resolve().parent.parent


def locate_lib(explicit: str | None) -> pathlib.Path:
    if explicit:
        return pathlib.Path(explicit)
    candidates = [
        REPO / "target" / profile / name
        for profile in ("debug", "release")
        for name in ("libtoolforge.so", "libtoolforge.dylib", "toolforge.dll")
    ]
    for c in candidates:
        if c.exists():
            return c
    sys.exit("compiled extension not found; run `cargo build -p toolforge-py` first")


def main() -> None:
    parser = argparse.ArgumentParser()
    parser.add_argument("--lib", help="path to the compiled cdylib")
    args = parser.parse_args()

    workdir = pathlib.Path(tempfile.mkdtemp(prefix="toolforge-smoke-"))
    lib = locate_lib(args.lib)
    suffix = ".pyd" if lib.suffix == ".dll" else ".so"
    shutil.copy2(lib, workdir / f"toolforge{suffix}")
    sys.path.insert(0, str(workdir))

    import toolforge

    # --- spec parsing and canonical ids ---------------------------------
    raw = json.dumps(
        {
            "name": "getWeather",
            "description": "Get the  current weather",
            "parameters": {
                "type": "dict",
                "properties": {"city": {"description": "The city name", "type": "string"}},
                "required": ["city"],
            },
        }
    )
    spec = json.loads(toolforge.parse_function_spec(raw, "smoke"))
    assert spec["name"] == "getWeather"
    assert spec["description"] == "Get the current weather"  # whitespace normalized
    assert spec["inputs"][0]["required"] is True
    reparsed = json.loads(
        toolforge.parse_function_spec(toolforge.canonical_text(json.dumps(spec)), "smoke")
    )
    assert reparsed["id"] == spec["id"], "canonical text must round-trip to the same id"

    # --- embedding text + mock vectors ----------------------------------
    assert toolforge.render_embedding_text("The city name", "string") == "DESC The city name TYPE string"
    v1, v2 = toolforge.mock_embed(["a", "a"], seed=7, dim=32)
    assert v1 == v2 and abs(sum(x * x for x in v1) - 1.0) < 1e-9

    # --- assistant message and tool return parsing ----------------------
    msg = json.loads(
        toolforge.parse_assistant_message(
            '<think>call it</think><tool_call>{"name": "getWeather", "arguments": {"city": "Oslo"}}</tool_call>'
        )
    )
    assert msg["role"] == "assistant" and msg["tool_calls"][0]["arguments"]["city"] == "Oslo"
    ret = json.loads(toolforge.parse_func_return('<func_return> {"temp": "25C"} </func_return>'))
    assert ret["temp"] == "25C"

    # --- full offline pipeline run --------------------------------------
    out_dir = workdir / "out"
    config = {
        "backend": "mock",
        "embedding_dim": 64,
        "inputs": [{"path": str(REPO / "data" / "corpus12.jsonl"), "source": "demo"}],
        "out_dir": str(out_dir),
        "graph": {"random_edge_rate": 0.05, "walk_len_max": 12, "node_visit_budget": 30},
        "chain_count": 6,
        "rng_seed": 7,
    }
    config_path = workdir / "config.json"
    config_path.write_text(json.dumps(config))
    manifests = json.loads(toolforge.run_all(str(config_path)))
    assert [m["stage"] for m in manifests] == [
        "normalize", "embed", "graph", "chains", "intents",
        "simulate", "filter", "split", "stats",
    ]
    split = next(m for m in manifests if m["stage"] == "split")
    assert split["items_out"] > 0, "offline run must produce samples"

    # --- split + stats over the run's artifacts -------------------------
    trajectories = [json.loads(l) for l in (out_dir / "trajectories.jsonl").open()]
    traj = trajectories[0]
    mask = {
        str(i): True
        for i, m in enumerate(traj["messages"])
        if m["role"] == "assistant"
    }
    samples = json.loads(toolforge.split_trajectory(json.dumps(traj), json.dumps(mask)))
    assert len(samples) == len(mask)
    assert all(s["messages"][-1]["role"] == "assistant" for s in samples)

    stats = json.loads(
        toolforge.compute_stats(str(out_dir / "trajectories.jsonl"), str(out_dir / "samples.jsonl"))
    )
    assert stats["trajectory_count"] == len(trajectories)

    print(f"smoke test OK: {split['items_out']} samples from {len(trajectories)} trajectories ({workdir})")


if __name__ == "__main__":
    main()
