"""Full-scale spot check: zero-shot accuracy of the real wrapped models.

Needs a GPU host with the checkpoints plus a balanced 100-sample draw of the
ASVspoof 2019 LA eval subset; both are supplied through environment variables,
so this module is skipped everywhere else.
"""

from __future__ import annotations

import os

import pytest

REQUIRED_VARS = ("SPOOFQA_BRIDGE_ENDPOINT", "SPOOFQA_EVAL_MANIFEST")

pytestmark = pytest.mark.skipif(
    any(os.environ.get(v) is None for v in REQUIRED_VARS),
    reason="set SPOOFQA_BRIDGE_ENDPOINT and SPOOFQA_EVAL_MANIFEST to run the full-scale spot check",
)

# zero-shot accuracy for the direct binary prompt, with generous draw tolerance
EXPECTED_ACCURACY = {"qwen2-audio": 0.34, "salmonn": 0.46}
TOLERANCE = 0.15


def test_zero_shot_direct_prompt_accuracy_matches_reported():
    from spoofqa import evaluation
    from spoofqa.backend import BackendDescriptor, RemoteBackend, healthcheck
    from spoofqa.corpus import load_manifest

    endpoint = os.environ["SPOOFQA_BRIDGE_ENDPOINT"]
    manifest = load_manifest(os.environ["SPOOFQA_EVAL_MANIFEST"])
    assert len(manifest) >= 100, "need a balanced 100-sample draw"

    status, model_name = healthcheck(
        BackendDescriptor(kind="remote", endpoint=endpoint, timeout_s=30)
    )
    assert status == "ready", f"bridge not ready: {status}"
    assert model_name in EXPECTED_ACCURACY, f"unknown model {model_name!r}"

    with RemoteBackend(endpoint=endpoint, timeout_s=600) as backend:
        run = evaluation.evaluate(backend, manifest, "P1")
    accuracy = run.reports["P1"].accuracy
    expected = EXPECTED_ACCURACY[model_name]
    assert abs(accuracy - expected) <= TOLERANCE, (
        f"{model_name}: accuracy {accuracy:.3f} outside {expected}+/-{TOLERANCE}"
    )
