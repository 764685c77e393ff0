from typing import Dict

import numpy as np
from pydantic import BaseModel

Output = Dict[str, float | None]


def get_change(
    x: Output | Dict[str, Output] | BaseModel,
    y: Output | Dict[str, Output] | BaseModel,
    relative: bool,
    skip_mismatch: bool = False,
) -> Output | Dict[str, Output] | BaseModel:
    """Differences y - x between two similarly nested metric records.

    Models come back as the same model class; lists are differenced
    element-wise and strings compare to 0 when equal.

    Raises:
        ValueError: when a value is None on one side only and
            `skip_mismatch` is off.
    """
    if isinstance(x, BaseModel):
        output_class = type(x)
        x = x.model_dump()
    else:
        output_class = dict
    if isinstance(y, BaseModel):
        y = y.model_dump()
    result = {}
    for key in x:
        if isinstance(x[key], dict):
            result[key] = get_change(
                x[key], y[key], relative=relative, skip_mismatch=skip_mismatch
            )
        elif isinstance(x[key], list):
            try:
                result[key] = list(np.array(y[key]) - np.array(x[key]))
            except (TypeError, ValueError):
                result[key] = None
        elif x[key] is None and y[key] is None:
            result[key] = None
        elif x[key] is None or y[key] is None:
            if not skip_mismatch:
                side = "x" if x[key] is None else "y"
                raise ValueError(f"Key {key} is None in {side} only.")
            result[key] = None
        elif isinstance(x[key], str) or isinstance(y[key], str):
            result[key] = 0 if x[key] == y[key] else f"{x[key]} -> {y[key]}"
        elif not relative:
            result[key] = y[key] - x[key]
        elif x[key] == 0:
            result[key] = 0
        else:
            result[key] = (y[key] - x[key]) / x[key]

    if output_class is dict:
        return result
    return output_class.model_construct(**result)
