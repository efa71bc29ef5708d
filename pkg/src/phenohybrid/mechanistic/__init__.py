"""Baseline biophysical dormancy models and their grid-search calibration."""

from .calibration import (
    Calibration,
    GridSpec,
    MechanisticPredictor,
    grid_search,
    load_calibration,
    params_filename,
    save_calibration,
)
from .models import (
    NO_BLOOM,
    NO_BLOOM_CODE,
    ChillModelKind,
    MechanisticParams,
    chill_days,
    chill_hours,
    cumulative_chill,
    daily_chill,
    gdh_forcing,
    predict_bloom_batch,
    predict_bloom_hard,
    score_day,
    score_days,
    utah_chill,
    utah_weight,
)
