"""
Configuration objects of the engine. Every experiment, simulation and run is
described by one of these models and stored as JSON next to its outputs.
"""
from datetime import date, datetime, time, timedelta, timezone
from enum import Enum
from typing import Dict, List, Optional

from pydantic import BaseModel, Field, root_validator, validator

REGIONS = ["Jakarta", "Jawa Barat", "Jawa Tengah", "Jawa Timur", "Banten", "Sumatera Utara", "Sulawesi Selatan", "Bali"]


class _Config(BaseModel):
    class Config:
        extra = "forbid"
        validate_assignment = True


class Normalization(str, Enum):
    ZSCORE = "zscore"
    MINMAX_CAP = "minmax_cap"
    NONE = "none"


class Extractor(str, Enum):
    REGION = "region"
    DAYS_SINCE_LAST_NUDGE = "days_since_last_nudge"
    ORDER_DAYS = "order_days"
    EXPENDITURE = "expenditure"
    MEAN_DAYS_BETWEEN_LOGINS = "mean_days_between_logins"
    DAYS_SINCE_FIRST_LOGIN = "days_since_first_login"
    NUDGES_OPENED = "nudges_opened"
    APP_MINUTES = "app_minutes"


# Extractors that look back over a window ending at the decision point
WINDOWED_EXTRACTORS = {
    Extractor.ORDER_DAYS,
    Extractor.EXPENDITURE,
    Extractor.MEAN_DAYS_BETWEEN_LOGINS,
    Extractor.NUDGES_OPENED,
    Extractor.APP_MINUTES,
}


class FeatureDescriptor(_Config):
    name: str = Field(..., min_length=1)
    extractor: Extractor
    window_days: Optional[int] = Field(None, gt=0)
    normalization: Normalization = Normalization.NONE
    # Horizon for minmax_cap, in the feature's own unit (days for recencies)
    cap: Optional[float] = Field(None, gt=0)
    one_hot_categories: Optional[List[str]] = None
    allow_other: bool = False

    @validator("one_hot_categories")
    def _non_empty_categories(cls, v):
        if v is not None and len(v) == 0:
            raise ValueError("one_hot_categories must be non-empty when present")
        if v is not None and len(set(v)) != len(v):
            raise ValueError("one_hot_categories must be unique")
        return v

    @root_validator(skip_on_failure=True)
    def _consistent(cls, values):
        extractor = values["extractor"]
        if extractor == Extractor.REGION:
            if values.get("one_hot_categories") is None:
                raise ValueError(f"feature '{values['name']}': a region feature needs one_hot_categories")
            if values["normalization"] != Normalization.NONE:
                raise ValueError(f"feature '{values['name']}': one-hot features are not normalized")
        elif values.get("one_hot_categories") is not None:
            raise ValueError(f"feature '{values['name']}': only region features can be one-hot encoded")
        if extractor in WINDOWED_EXTRACTORS and values.get("window_days") is None:
            raise ValueError(f"feature '{values['name']}': extractor {extractor.value} needs window_days")
        if values["normalization"] == Normalization.MINMAX_CAP and values.get("cap") is None and values.get("window_days") is None:
            raise ValueError(f"feature '{values['name']}': minmax_cap needs a cap or window_days")
        return values

    @property
    def columns(self) -> List[str]:
        if self.one_hot_categories is None:
            return [self.name]
        columns = [f"{self.name}={c}" for c in self.one_hot_categories]
        if self.allow_other:
            columns.append(f"{self.name}=other")
        return columns

    @property
    def width(self) -> int:
        return len(self.columns)


class ContextSpec(_Config):
    features: List[FeatureDescriptor]

    @validator("features")
    def _unique_names(cls, v):
        names = [f.name for f in v]
        duplicates = sorted({n for n in names if names.count(n) > 1})
        if duplicates:
            raise ValueError(f"duplicate feature names: {duplicates}")
        return v

    @property
    def column_names(self) -> List[str]:
        return ["intercept"] + [c for f in self.features for c in f.columns]

    @property
    def dimension(self) -> int:
        """Length of a context vector, intercept included."""
        return len(self.column_names)


class EligibilityCriteria(_Config):
    max_users_per_pharmacy: int = Field(2, gt=0)
    min_weekly_login_rate_window_days: int = Field(60, gt=0)
    # Connected on average every week over the window: distinct login days required
    min_login_days: int = Field(8, ge=0)
    require_login_within_days: int = Field(40, gt=0)
    top_spender_exclusion_quantile: float = Field(0.80, ge=0.0, le=1.0)
    spend_lookback_days: int = Field(60, gt=0)
    language: Optional[str] = "id"


class PriorConfig(_Config):
    mean: float = 0.0
    precision: float = Field(1.0, gt=0)
    shape: float = Field(2.0, gt=0)
    rate: float = Field(1.0, gt=0)


class ExperimentConfig(_Config):
    name: str = Field(..., min_length=1)
    start: date
    duration_weeks: int = Field(..., ge=1)
    decision_weekday: int = Field(0, ge=0, le=6)  # Monday
    decision_hour: int = Field(6, ge=0, le=23)
    utc_offset_hours: float = 7.0
    pure_control_fraction: float = Field(..., ge=0.0, le=1.0)
    eligibility: EligibilityCriteria = EligibilityCriteria()
    context: ContextSpec
    reward_window_days: int = Field(6, gt=0)
    nudge_expiry_days: int = Field(7, gt=0)
    top_k: int = Field(100, gt=0)
    candidate_lookback_days: int = Field(90, gt=0)
    profile_lookback_days: int = Field(90, gt=0)
    seed: int = 0
    stock_path: Optional[str] = None
    excluded_users: List[str] = []
    prior: PriorConfig = PriorConfig()
    reward_scale: float = Field(1000.0, gt=0)
    reward_winsor_quantile: float = Field(0.99, gt=0.0, le=1.0)

    @validator("reward_window_days")
    def _window_before_next_decision(cls, v):
        if v >= 7:
            raise ValueError("reward_window_days must be < 7 so rewards resolve before the next decision point")
        return v

    def decision_time(self, week: int) -> datetime:
        """UTC time of the decision point of week `week` (1-based)."""
        if week < 1:
            raise ValueError(f"weeks are 1-based, got {week}")
        days_ahead = (self.decision_weekday - self.start.weekday()) % 7
        local = datetime.combine(self.start + timedelta(days=days_ahead), time(self.decision_hour))
        first = (local - timedelta(hours=self.utc_offset_hours)).replace(tzinfo=timezone.utc)
        return first + timedelta(weeks=week - 1)

    @property
    def end_time(self) -> datetime:
        return self.decision_time(self.duration_weeks) + timedelta(days=7)


class SimConfig(_Config):
    n_pharmacies: int = Field(200, ge=0)
    n_skus: int = Field(60, ge=2)
    n_blocks: int = Field(6, ge=1)
    history_weeks: int = Field(10, ge=1)
    history_end: datetime = datetime(2024, 2, 4, 23, 0, tzinfo=timezone.utc)
    uplift_effect: float = Field(1.15, gt=0)
    responder_fraction: float = Field(0.5, ge=0.0, le=1.0)
    close_probability: float = Field(0.0, ge=0.0, le=1.0)
    regions: List[str] = REGIONS
    region_weights: Optional[List[float]] = None
    user_count_weights: List[float] = [0.72, 0.23, 0.05]
    language: str = "id"
    other_language_fraction: float = Field(0.05, ge=0.0, le=1.0)
    mean_weekly_logins: float = Field(2.5, gt=0)
    mean_weekly_orders: float = Field(1.5, gt=0)
    median_line_revenue: float = Field(60.0, gt=0)
    out_of_stock_fraction: float = Field(0.05, ge=0.0, lt=1.0)
    seed: int = 0

    @validator("history_end")
    def _utc(cls, v):
        if v.tzinfo is None:
            v = v.replace(tzinfo=timezone.utc)
        return v.astimezone(timezone.utc).replace(microsecond=0)

    @validator("user_count_weights")
    def _three_weights(cls, v):
        if len(v) != 3 or any(w < 0 for w in v) or sum(v) <= 0:
            raise ValueError("user_count_weights needs three non-negative weights for 1, 2 and 3 users")
        return v

    @root_validator(skip_on_failure=True)
    def _region_weights(cls, values):
        weights = values.get("region_weights")
        if weights is not None and (len(weights) != len(values["regions"]) or any(w < 0 for w in weights)):
            raise ValueError("region_weights must be non-negative and match regions")
        return values

    @property
    def history_start(self) -> datetime:
        return self.history_end - timedelta(weeks=self.history_weeks)


class RunManifest(_Config):
    command: str
    config_paths: Dict[str, str] = {}
    seeds: Dict[str, int] = {}
    output_dir: str
    artifacts: Dict[str, str] = {}
    started_at: datetime
    finished_at: Optional[datetime] = None


def format_validation_error(error) -> List[str]:
    """Field-level messages of a pydantic ValidationError, ex. 'eligibility.language: ...'."""
    messages = []
    for item in error.errors():
        field = ".".join(str(p) for p in item["loc"] if p != "__root__") or "<root>"
        messages.append(f"{field}: {item['msg']}")
    return messages
