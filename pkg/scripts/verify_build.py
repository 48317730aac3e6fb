"""One-shot environment probe for a fresh checkout.

Imports every native dependency the project needs (numpy, pandas, Pillow,
reportlab, tqdm) and runs one tiny finite-difference gradient check
through the autodiff core. Prints a per-check PASS/FAIL line plus a final
`RESULT: PASS` / `RESULT: FAIL` line; exits 0 on full success, 1 otherwise.

Run from the repo root: `python scripts/verify_build.py`.
"""
import importlib
import sys
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent
if str(ROOT) not in sys.path:
    sys.path.insert(0, str(ROOT))


# (module_name, display_name) pairs; locked by `test_enumerates_all_required_deps`.
DEPS = [
    ("numpy", "numpy"),
    ("pandas", "pandas"),
    ("PIL", "Pillow"),
    ("reportlab", "reportlab"),
    ("tqdm", "tqdm"),
]

GRAD_CASE = "unary.sigmoid"


def _check_imports():
    """Import each required dep. Return True iff all passed."""
    all_ok = True
    for module_name, display_name in DEPS:
        try:
            importlib.import_module(module_name)
        except Exception as e:
            print(f"FAIL: {display_name} ({type(e).__name__}: {e})")
            all_ok = False
        else:
            print(f"PASS: {display_name}")
    return all_ok


def _check_gradients():
    """One seeded gradient check through tensor_core. Return True iff ok."""
    try:
        import grad_suite

        result = grad_suite.run_case(grad_suite.CASES[GRAD_CASE], seed=0)
    except Exception as e:
        print(f"FAIL: grad_check ({type(e).__name__}: {e})")
        return False
    if result.passed:
        print(f"PASS: grad_check ({GRAD_CASE}, max_rel_err={result.report.max_rel_err:.2e})")
        return True
    print(f"FAIL: grad_check ({GRAD_CASE}, max_rel_err={result.report.max_rel_err:.2e})")
    return False


def main():
    imports_ok = _check_imports()
    grads_ok = _check_gradients() if imports_ok else False
    if imports_ok and grads_ok:
        print("RESULT: PASS")
        return 0
    print("RESULT: FAIL")
    return 1


if __name__ == "__main__":
    sys.exit(main())
