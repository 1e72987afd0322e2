import pytest

from check_structure import main as check_run_dir
from run_experiment import run_experiment


@pytest.mark.slow
def test_heteroscedastic_model_is_calibrated_and_accurate(tmp_path):
    results, calibration_ok, accuracy_ok = run_experiment(tmp_path, iterations=2000)
    assert calibration_ok, results
    assert accuracy_ok, results
    for seed in results:
        assert check_run_dir(tmp_path / f"seed_{seed}") == 0
