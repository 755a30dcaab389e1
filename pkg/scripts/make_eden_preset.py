"""Regenerate src/trajmix/presets/eden.json.

Group curves are specified by their values at ages 2, 3 and 5.5 and
converted to raw-age polynomial coefficients; membership intercepts are
calibrated so the marginal group shares equal the target prevalences.
"""
import json
from pathlib import Path

from trajmix.simulate import GeneratorConfig, calibrate_intercepts, curve_coefficients

GRID = (2.0, 3.0, 5.5)
SIGMA = 0.45

CURVES = {
    # name: (prevalence, degree, values at GRID)
    "SS": (0.049, 2, (10.15, 9.55, 9.95)),
    "MLS": (0.478, 1, (10.50, None, 10.95)),
    "MHS": (0.372, 1, (11.60, None, 11.20)),
    "LS": (0.045, 1, (12.75, None, 11.95)),
    "CS": (0.056, 2, (12.20, 10.20, 10.45)),
}

COVARIATES = [
    {"name": "center", "type": "categorical", "levels": ["Poitiers", "Nancy"], "probs": [0.532, 0.468], "reference": "Poitiers"},
    {"name": "education", "type": "categorical", "levels": ["<high school", "high school", ">high school"],
     "probs": [0.152, 0.182, 0.666], "reference": "high school"},
    {"name": "income", "type": "categorical", "levels": ["<1500", "1501-3000", ">3000"],
     "probs": [0.104, 0.589, 0.307], "reference": ">3000"},
    {"name": "maternal_age", "type": "continuous", "mean": 30.0, "sd": 4.6, "lower": 18.0, "upper": 46.0, "unit": "years"},
    {"name": "smoking", "type": "categorical", "levels": ["never", "after pregnancy", "always"],
     "probs": [0.643, 0.134, 0.223], "reference": "never"},
    {"name": "depressive_symptoms", "type": "categorical", "levels": ["no", "yes"], "probs": [0.948, 0.052], "reference": "no"},
    {"name": "first_child", "type": "categorical", "levels": ["no", "yes"], "probs": [0.534, 0.466], "reference": "no"},
    {"name": "gender", "type": "categorical", "levels": ["girl", "boy"], "probs": [0.468, 0.532], "reference": "girl"},
    {"name": "night_waking", "type": "categorical", "levels": ["no", "yes"], "probs": [0.797, 0.203], "reference": "no"},
    {"name": "parental_presence", "type": "categorical", "levels": ["no", "yes"], "probs": [0.885, 0.115], "reference": "no"},
    {"name": "feeding_at_night", "type": "categorical", "levels": ["no", "yes"], "probs": [0.736, 0.264], "reference": "no"},
    {"name": "tv_hours", "type": "continuous", "mean": 0.67, "sd": 0.72, "lower": 0.0, "upper": 6.0, "unit": "hours/day"},
    {"name": "processed_food", "type": "continuous", "mean": -0.05, "sd": 0.94, "unit": "pattern score"},
]

MEMBERSHIP = {
    "reference": "MHS",
    "coefficients": {
        "SS": {"gender=boy": 0.90, "first_child=yes": 1.16, "maternal_age": 0.13,
               "night_waking=yes": 1.31, "tv_hours": 0.75},
        "MLS": {"maternal_age": 0.06, "night_waking=yes": 0.65},
        "CS": {"center=Nancy": 0.94, "feeding_at_night=yes": 0.90, "smoking=always": 0.88},
        "LS": {"feeding_at_night=yes": -0.99},
    },
}

PATTERNS = {"111": 862, "011": 123, "101": 35, "110": 185, "100": 140, "010": 160, "001": 90, "000": 304}


def main():
    groups = []
    for name, (prev, degree, vals) in CURVES.items():
        pts = [(a, v) for a, v in zip(GRID, vals) if v is not None]
        coefs = curve_coefficients([a for a, _ in pts], [v for _, v in pts], degree)
        groups.append({"name": name, "prevalence": prev, "coefficients": list(coefs)})
    cfg = GeneratorConfig.from_dict({
        "name": "eden",
        "n_subjects": 1899,
        "grid": list(GRID),
        "groups": groups,
        "sigma": SIGMA,
        "seed": 0,
        "missingness": {"mode": "pattern", "counts": PATTERNS},
        "covariates": COVARIATES,
        "covariate_missing_rate": 0.04,
        "membership": MEMBERSHIP,
    })
    mem = calibrate_intercepts(cfg)
    cfg = cfg.with_(membership=mem)
    out = Path(__file__).resolve().parents[1] / "src" / "trajmix" / "presets" / "eden.json"
    out.write_text(cfg.to_json(), encoding="utf-8")
    print(f"wrote {out}")


if __name__ == "__main__":
    main()
