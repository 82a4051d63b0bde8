"""
Tabular helpers for reporting results
"""
from typing import Optional, Sequence

import numpy as np
import pandas as pd

SUPPORT = "support"
PREDICTED = "predicted"


def confusion_frame(matrix: np.ndarray, names: Optional[Sequence[str]] = None, totals: bool = False) -> pd.DataFrame:
    """Label a confusion matrix: rows are the true device, columns the prediction

    With `totals`, a `support` column counts the packets of each true device and a
    `predicted` row counts how often each device was chosen; their corner is the number
    of packets scored.

    >>> df = confusion_frame(np.array([[2, 0], [1, 3]]), totals=True)
    >>> df.columns.tolist()
    ['pred_0', 'pred_1', 'support']
    >>> df.loc["predicted"].tolist()
    [3, 3, 6]
    >>> df["support"].tolist()
    [2, 4, 6]
    """
    matrix = np.asarray(matrix)
    n = matrix.shape[0]
    names = list(names) if names is not None else [str(i) for i in range(n)]
    df = pd.DataFrame(
        matrix,
        index=pd.Index([f"true_{name}" for name in names]),
        columns=[f"pred_{name}" for name in names],
    )
    if totals:
        df.loc[PREDICTED] = df.sum(axis=0)
        df[SUPPORT] = df.sum(axis=1)
    return df
