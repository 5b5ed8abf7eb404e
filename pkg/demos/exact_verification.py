"""Enumerate every corpus kernel and print its exact balance checks."""

from __future__ import annotations

from imcmc.corpus import CORPUS, run_instance


def main(tol: float = 1e-12) -> bool:
    ok = True
    for name, inst in CORPUS.items():
        reports, n = run_instance(name, tol)
        for rep in reports:
            ok &= rep.passed
            print(f"{name:20s} {n:5d} states  {rep.line()}")
    print("all checks pass" if ok else "some checks fail")
    return ok


if __name__ == "__main__":
    main()
