"""
Test Runner for the Bragg Interferometer Simulator
==================================================
Runs the unittest suites, one subprocess per suite.

Usage:
    python run_tests.py             # Run all suites
    python run_tests.py beam        # Run test_beam.py
    python run_tests.py bragg       # Run test_bragg.py
    python run_tests.py tuning      # Run test_tuning.py
"""

import os
import subprocess
import sys

# Add parent directory to path to find our modules
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

TESTS = {
    "beam": ("test_beam.py", "Kinematics, collimation geometry and atom sampling"),
    "bragg": ("test_bragg.py", "Two-level and momentum-ladder diffraction"),
    "worker": ("test_worker.py", "Ordered worker pool"),
    "interferometer": ("test_interferometer.py", "Paths, phases and Monte Carlo scans"),
    "detector": ("test_detector.py", "Counting model and vibration noise"),
    "analysis": ("test_analysis.py", "Fringe fit and sensitivity"),
    "tuning": ("test_tuning.py", "Parameter scans and optimisation"),
    "cli": ("test_cli.py", "Configuration, commands and report"),
}


def run_test(test_file):
    """Run one suite in a fresh interpreter."""
    test_path = os.path.join(os.path.dirname(os.path.abspath(__file__)), test_file)
    print(f"\n{'=' * 60}")
    print(f"Running: {test_file}")
    print("=" * 60 + "\n")
    result = subprocess.run([sys.executable, test_path])
    return result.returncode == 0


def main():
    if len(sys.argv) > 1 and sys.argv[1].lower() != "all":
        test_name = sys.argv[1].lower()
        if test_name not in TESTS:
            print(f"Unknown test: {test_name}")
            print(f"Available: {', '.join(TESTS.keys())}, all")
            sys.exit(1)
        test_file, desc = TESTS[test_name]
        print(f"Running: {desc}")
        sys.exit(0 if run_test(test_file) else 1)

    print("Running all tests...\n")
    results = {}
    for name, (test_file, desc) in TESTS.items():
        print(f"\n[{name}] {desc}")
        results[name] = run_test(test_file)

    print("\n" + "=" * 60)
    print("TEST SUMMARY")
    print("=" * 60)
    for name, success in results.items():
        print(f"  {name}: {'PASS' if success else 'FAIL'}")

    passed = sum(1 for s in results.values() if s)
    total = len(results)
    print(f"\nTotal: {passed}/{total} passed")
    sys.exit(0 if passed == total else 1)


if __name__ == "__main__":
    main()
