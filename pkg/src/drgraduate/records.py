"""Per-image prediction records and their CSV form."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import grade_head, imageio

PREDICTION_FIELDS = ("id", "true", "y_r", "sigma2", "p0", "p1", "p2", "p3", "p4", "y_g", "u")


@dataclass
class PredictionRecord:
    id: str
    true: int | None
    y_r: float
    sigma2: float
    p: np.ndarray
    y_g: int
    u: float

    def row(self) -> dict:
        out = {"id": self.id, "true": self.true, "y_r": self.y_r, "sigma2": self.sigma2,
               "y_g": self.y_g, "u": self.u}
        out.update({f"p{c}": float(self.p[c]) for c in range(len(self.p))})
        return out


def make_records(ids, y_r, sigma2, true=None) -> list:
    preds = grade_head.predict(y_r, sigma2)
    true = [None] * len(preds) if true is None else list(true)
    return [PredictionRecord(str(i), None if t is None else int(t), g.y_r, g.sigma2, g.p, g.y_g, g.u)
            for i, t, g in zip(ids, true, preds)]


def write_predictions(path: str, records, digest: str | None = None) -> None:
    imageio.write_csv(path, PREDICTION_FIELDS, [r.row() for r in records],
                      comment=f"config_digest={digest}" if digest else None)


def read_predictions(path: str) -> list:
    out = []
    for lineno, row in imageio.read_csv(path, PREDICTION_FIELDS):
        try:
            p = np.array([float(row[f"p{c}"]) for c in range(grade_head.N_GRADES)])
            true = int(row["true"]) if row["true"] != "" else None
            rec = PredictionRecord(row["id"], true, float(row["y_r"]), float(row["sigma2"]), p,
                                   int(row["y_g"]), float(row["u"]))
        except ValueError as exc:
            raise imageio.DataError(f"{path}:{lineno}: {exc}") from None
        if not 0 <= rec.y_g < grade_head.N_GRADES or (true is not None and not 0 <= true < grade_head.N_GRADES):
            raise imageio.DataError(f"{path}:{lineno}: grade outside 0..4")
        out.append(rec)
    return out


def arrays(records) -> tuple:
    """(true, pred, u) arrays for records that carry a true grade."""
    kept = [r for r in records if r.true is not None]
    return (np.array([r.true for r in kept], dtype=np.int64), np.array([r.y_g for r in kept], dtype=np.int64),
            np.array([r.u for r in kept]))
