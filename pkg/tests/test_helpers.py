import json

import pandas as pd

from brainage import __version__
from brainage.services.helpers import metadata_header, read_csv_metadata, sha256_file, write_csv, write_json, write_manifest


def test_write_csv_prefixes_metadata(tmp_path):
    header = metadata_header(seed=4, config_hash="abc123", command="cv")
    path = write_csv(pd.DataFrame({"mae": [1.25, 2.5]}), tmp_path / "report.csv", header)

    lines = path.read_text(encoding="utf-8").splitlines()
    assert lines[0] == f"# artifact_version: {__version__}"
    assert read_csv_metadata(path) == {
        "artifact_version": __version__,
        "seed": "4",
        "config_hash": "abc123",
        "command": "cv",
    }
    assert pd.read_csv(path, comment="#")["mae"].tolist() == [1.25, 2.5]


def test_write_json_is_sorted(tmp_path):
    path = write_json(tmp_path / "nested" / "out.json", {"b": 1, "a": 2})

    assert path.read_text(encoding="utf-8") == '{\n  "a": 2,\n  "b": 1\n}\n'


def test_manifest_lists_hashes(tmp_path):
    first = write_json(tmp_path / "one.json", {"x": 1})
    second = write_csv(pd.DataFrame({"y": [1]}), tmp_path / "two.csv")

    manifest = json.loads(write_manifest(tmp_path, [second, first, tmp_path / "gone.csv"], "synth").read_text())

    assert list(manifest["artifacts"]) == ["one.json", "two.csv"]
    assert manifest["artifacts"]["one.json"]["sha256"] == sha256_file(first)
    assert manifest["artifacts"]["two.csv"]["bytes"] == second.stat().st_size
    assert manifest["command"] == "synth"
    assert "created" in manifest
