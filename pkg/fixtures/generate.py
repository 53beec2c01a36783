"""Regenerate the CSV fixtures shipped in this directory.

Run from the repo root:  python3 fixtures/generate.py

Provenance:
  - toy_oracle.csv: fully synthetic, fixed seed; small enough that the
    order-1 feature space can be enumerated exhaustively in tests.
  - pima_synthetic.csv: fully synthetic stand-in mimicking the schema and
    value ranges of the UCI Pima Indians Diabetes table (768 rows, 8
    features, binary outcome).  It is NOT the real dataset; this sandbox
    has no access to it.  Drop the genuine file in as pima_indian.csv to
    run the absolute-score checks against the published numbers.
  - diabetes_regression.csv: the real diabetes regression study bundled
    with scikit-learn (Efron et al., 442 rows, 10 features), exported
    unscaled.  Regenerating therefore needs scikit-learn installed.
"""

import os

import numpy as np

HERE = os.path.dirname(os.path.abspath(__file__))


def write_csv(path, header, columns):
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for row in zip(*columns):
            fh.write(",".join(f"{v:.6g}" for v in row) + "\n")
    print("wrote", path)


def make_toy_oracle():
    rng = np.random.default_rng(20240817)
    n = 160
    a = rng.uniform(0.5, 3.0, n)
    b = rng.uniform(0.5, 3.0, n)
    c = rng.uniform(1.0, 4.0, n)
    y = a * b + 0.3 * c + 0.05 * rng.normal(size=n)
    write_csv(os.path.join(HERE, "toy_oracle.csv"), ["a", "b", "c", "y"], [a, b, c, y])


def make_pima_synthetic():
    rng = np.random.default_rng(76885)
    n = 768
    age = np.clip(rng.gamma(3.0, 8.0, n) + 21, 21, 81).round()
    preg = np.clip(rng.poisson(np.clip((age - 20) / 8.0, 0.2, None)), 0, 17).astype(float)
    glucose = np.clip(rng.normal(121, 31, n), 44, 199).round()
    bp = np.clip(rng.normal(69 + 0.1 * (age - 33), 12, n), 24, 122).round()
    skin = np.clip(rng.normal(29, 10, n), 7, 63).round()
    bmi = np.clip(rng.normal(32, 6.8, n) + 0.15 * (skin - 29), 18.2, 67.1).round(1)
    insulin = np.clip(rng.gamma(2.0, 60.0, n) + 1.2 * (glucose - 100), 14, 846).round()
    dpf = np.clip(rng.gamma(2.2, 0.21, n), 0.078, 2.42).round(3)

    # outcome risk: nonlinear in glucose/BMI with interactions, so composed
    # features genuinely help a depth-limited forest; latent noise keeps the
    # classes overlapping at a realistic level (baseline F1 in the mid 0.7s)
    logit = (
        -2.0
        + 0.044 * (glucose - 121)
        + 0.18 * (bmi - 32)
        + 0.06 * (age - 33)
        + 1.8 * (dpf - 0.47)
        + 0.18 * preg
        + 0.024 * ((glucose - 120) / 30) * (bmi - 32)
        + 0.8 * np.log1p(insulin / (glucose + 1))
        + 0.6 * rng.normal(size=n)
    )
    p = 1.0 / (1.0 + np.exp(-logit))
    outcome = (rng.uniform(size=n) < p).astype(float)
    write_csv(
        os.path.join(HERE, "pima_synthetic.csv"),
        [
            "Pregnancies", "Glucose", "BloodPressure", "SkinThickness",
            "Insulin", "BMI", "DiabetesPedigreeFunction", "Age", "Outcome",
        ],
        [preg, glucose, bp, skin, insulin, bmi, dpf, age, outcome],
    )


def make_diabetes_regression():
    from sklearn.datasets import load_diabetes

    data = load_diabetes(scaled=False)
    cols = [data.data[:, i] for i in range(data.data.shape[1])]
    write_csv(
        os.path.join(HERE, "diabetes_regression.csv"),
        list(data.feature_names) + ["progression"],
        cols + [data.target],
    )


if __name__ == "__main__":
    make_toy_oracle()
    make_pima_synthetic()
    make_diabetes_regression()
