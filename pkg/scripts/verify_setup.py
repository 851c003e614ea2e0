#!/usr/bin/env python3
"""
Verification script for the LitMAS project.
Checks the layout, the dependency list, the shipped configs and runs the fast tests.
"""

import os
import subprocess
import sys

sys.path.append(os.path.join(os.path.dirname(__file__), ".."))

REQUIRED_PACKAGES = ["numpy", "scipy", "python-dotenv", "pytest", "pytest-mock", "scikit-learn"]
MODULES = ["errors", "config", "numgrad", "dataio", "model", "losses", "trainer", "padmetrics", "manifest", "main"]
CONFIGS = ["synth_benchmark.cfg", "train_benchmark.cfg", "train_default.cfg", "tdcf_asvspoof2019.cfg"]


def report(checks):
    for check, passed in checks.items():
        status = "✓" if passed else "✗"
        print(f"{status} {check}")
    return all(checks.values())


def check_layout():
    """Project directories, modules and the requirements file."""
    print("=" * 60)
    print("Project Layout")
    print("=" * 60)

    checks = {
        "src/ and tests/ exist": os.path.isdir("src") and os.path.isdir("tests"),
        "requirements.txt exists": os.path.exists("requirements.txt"),
        "run.py exists": os.path.exists("run.py"),
    }
    for module in MODULES:
        checks[f"src/{module}.py exists"] = os.path.exists(f"src/{module}.py")

    if checks["requirements.txt exists"]:
        with open("requirements.txt") as f:
            content = f.read()
        for package in REQUIRED_PACKAGES:
            checks[f"{package} in requirements.txt"] = package in content

    return report(checks)


def check_configs():
    """Every shipped config parses with the current field set."""
    print("\n" + "=" * 60)
    print("Shipped Configs")
    print("=" * 60)

    from src.dataio import SynthConfig
    from src.errors import LitmasError
    from src.padmetrics import TdcfParams
    from src.trainer import TrainConfig

    loaders = {
        "synth_benchmark.cfg": SynthConfig.from_file,
        "train_benchmark.cfg": TrainConfig.from_file,
        "train_default.cfg": TrainConfig.from_file,
        "tdcf_asvspoof2019.cfg": TdcfParams.from_file,
    }
    checks = {}
    for name in CONFIGS:
        try:
            loaders[name](os.path.join("configs", name))
            checks[f"configs/{name} parses"] = True
        except LitmasError as e:
            print(f"  {name}: {e}")
            checks[f"configs/{name} parses"] = False
    return report(checks)


def run_tests():
    """Run the fast test suite."""
    print("\n" + "=" * 60)
    print("Running Tests with pytest")
    print("=" * 60)

    try:
        result = subprocess.run(
            [sys.executable, "-m", "pytest", "tests/", "-m", "not slow", "-q", "--tb=short"],
            capture_output=True,
            text=True,
        )
        print(result.stdout)
        if result.returncode == 0:
            print("✓ All tests passed!")
            return True
        print("✗ Tests failed")
        print(result.stderr)
        return False
    except Exception as e:
        print(f"✗ Error running tests: {e}")
        return False


def main():
    """Run all verification checks"""
    print("LitMAS Project Verification")
    print("=" * 60)

    results = {
        "Layout": check_layout(),
        "Configs": check_configs(),
        "Tests Pass": run_tests(),
    }

    print("\n" + "=" * 60)
    print("Verification Summary")
    print("=" * 60)
    for part, passed in results.items():
        print(f"{'✓ PASS' if passed else '✗ FAIL'} {part}")

    all_passed = all(results.values())
    print("\n" + "=" * 60)
    print("✅ All verification checks passed!" if all_passed else "❌ Some verification checks failed.")
    return 0 if all_passed else 1


if __name__ == "__main__":
    sys.exit(main())
