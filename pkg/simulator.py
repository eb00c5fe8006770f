"""
Seeded synthetic pharmacy population that writes canonical event logs.

Pharmacies have 1-3 app users, a region, an order rate, a lognormal basket spend and
block-structured sku affinities (so co-purchase pairs exist). A latent share of
pharmacies responds to nudges: an opened nudge scales the rest of the week's spend
by `uplift_effect` and adds an order line of the recommended sku.
"""
import json
import logging
from datetime import datetime, timedelta
from typing import Dict, Iterable, List, Optional

import numpy as np
from pydantic import BaseModel, Field

from configs import SimConfig
from events import EventKind, EventRecord, LoginPayload, NudgePayload, OrderLine, OrderPayload, sort_events
from utils import parallel_map

logger = logging.getLogger(__name__)

BASELINE_STREAM = 0
RESPONSE_STREAM = 1

SECONDS_PER_DAY = 86400
LINE_REVENUE_SIGMA = 0.8
MEAN_SESSION_SECONDS = 300.0
# Days after the send by which a responder opens the message
RESPONSE_DELAY_DAYS = 2.0


class PharmacyProfile(BaseModel):
    index: int = Field(..., ge=0)
    pharmacy_id: str
    user_ids: List[str] = Field(..., min_items=1, max_items=3)
    languages: Dict[str, str]
    region: str
    base_weekly_order_rate: float = Field(..., ge=0)
    spend_scale: float = Field(..., gt=0)
    responsiveness: float = Field(..., ge=0, le=1)
    responder: bool
    engagement: float = Field(..., ge=0)
    affinity: List[float]

    class Config:
        allow_mutation = False


def catalog(config: SimConfig) -> List[str]:
    return [f"sku{k:03d}" for k in range(config.n_skus)]


def sku_blocks(config: SimConfig) -> np.ndarray:
    """Block index of each catalog sku; skus of one block are bought together."""
    return np.arange(config.n_skus) % config.n_blocks


def generate_population(config: SimConfig) -> List[PharmacyProfile]:
    n = config.n_pharmacies
    if n == 0:
        return []
    rng = np.random.default_rng([config.seed, 0])

    region_p = np.asarray(config.region_weights or [1.0] * len(config.regions), dtype=float)
    regions = rng.choice(len(config.regions), size=n, p=region_p / region_p.sum())
    count_p = np.asarray(config.user_count_weights, dtype=float)
    n_users = rng.choice([1, 2, 3], size=n, p=count_p / count_p.sum())

    # Gamma draws keep the population means at the configured rates
    engagement = rng.gamma(4.0, config.mean_weekly_logins / 4.0, size=n)
    order_rate = rng.gamma(3.0, config.mean_weekly_orders / 3.0, size=n)
    spend_scale = config.median_line_revenue * rng.lognormal(0.0, 0.3, size=n)

    # Responders are the most engaged pharmacies, up to noise
    score = np.log(engagement) + rng.normal(0.0, 0.5, size=n)
    n_responders = int(round(config.responder_fraction * n))
    responders = np.zeros(n, dtype=bool)
    if n_responders:
        responders[np.argsort(-score, kind="stable")[:n_responders]] = True
    responsiveness = np.where(responders, rng.beta(8.0, 2.0, size=n), 0.0)

    blocks = sku_blocks(config)
    favourite = rng.integers(0, config.n_blocks, size=n)
    population = []
    for i in range(n):
        pharmacy_id = f"ph{i:05d}"
        users = [f"{pharmacy_id}-u{j}" for j in range(n_users[i])]
        languages = {u: ("en" if rng.random() < config.other_language_fraction else config.language) for u in users}
        affinity = rng.gamma(0.5, 1.0, size=config.n_skus) + np.where(blocks == favourite[i], 2.0, 0.0)
        population.append(
            PharmacyProfile(
                index=i,
                pharmacy_id=pharmacy_id,
                user_ids=users,
                languages=languages,
                region=config.regions[regions[i]],
                base_weekly_order_rate=float(order_rate[i]),
                spend_scale=float(spend_scale[i]),
                responsiveness=float(responsiveness[i]),
                responder=bool(responders[i]),
                engagement=float(engagement[i]),
                affinity=(affinity / affinity.sum()).tolist(),
            )
        )
    logger.info("Generated %d pharmacies (%d users, %d responders)", n, int(n_users.sum()), n_responders)
    return population


def stock_list(config: SimConfig) -> List[str]:
    """Catalog minus a seeded out-of-stock share."""
    skus = catalog(config)
    rng = np.random.default_rng([config.seed, 1])
    n_out = int(round(config.out_of_stock_fraction * len(skus)))
    out = set(rng.choice(len(skus), size=n_out, replace=False).tolist()) if n_out else set()
    return [sku for k, sku in enumerate(skus) if k not in out]


def _rng(seed: int, week_start: datetime, pharmacy: PharmacyProfile, stream: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(week_start.timestamp()), pharmacy.index, stream])


def _offset(rng, seconds: int) -> timedelta:
    return timedelta(seconds=int(rng.integers(0, max(seconds, 1))))


def _basket(rng, pharmacy: PharmacyProfile, skus: List[str]) -> List[OrderLine]:
    size = min(1 + rng.poisson(2.0), len(skus))
    chosen = rng.choice(len(skus), size=size, replace=False, p=np.asarray(pharmacy.affinity))
    lines = []
    for k in sorted(chosen):
        qty = 1 + int(rng.poisson(1.0))
        revenue = pharmacy.spend_scale * rng.lognormal(0.0, LINE_REVENUE_SIGMA)
        lines.append(OrderLine(sku=skus[k], quantity=qty, unit_price=round(revenue / qty, 2)))
    return lines


def _scaled(order: EventRecord, factor: float) -> EventRecord:
    lines = [OrderLine(sku=l.sku, quantity=l.quantity, unit_price=round(l.unit_price * factor, 2)) for l in order.payload.lines]
    return EventRecord(timestamp=order.timestamp, user_id=order.user_id, pharmacy_id=order.pharmacy_id, kind=EventKind.ORDER, payload=OrderPayload(lines=lines))


def _pharmacy_week(pharmacy, nudges, week_start, seed, days, skus, uplift_effect, close_probability) -> List[EventRecord]:
    rng = _rng(seed, week_start, pharmacy, BASELINE_STREAM)
    span = int(days * SECONDS_PER_DAY)
    end = week_start + timedelta(seconds=span)
    events = []

    for user in pharmacy.user_ids:
        for _ in range(rng.poisson(pharmacy.engagement * days / 7.0)):
            payload = LoginPayload(lang=pharmacy.languages[user], region=pharmacy.region, session_seconds=round(rng.exponential(MEAN_SESSION_SECONDS), 1))
            events.append(EventRecord(timestamp=week_start + _offset(rng, span), user_id=user, pharmacy_id=pharmacy.pharmacy_id, kind=EventKind.LOGIN, payload=payload))

    orders = []
    for _ in range(rng.poisson(pharmacy.base_weekly_order_rate * days / 7.0)):
        user = pharmacy.user_ids[int(rng.integers(0, len(pharmacy.user_ids)))]
        orders.append(EventRecord(timestamp=week_start + _offset(rng, span), user_id=user, pharmacy_id=pharmacy.pharmacy_id, kind=EventKind.ORDER, payload=OrderPayload(lines=_basket(rng, pharmacy, skus))))

    # Responses draw from their own stream so baseline activity is the same with or without nudges
    response_rng = _rng(seed, week_start, pharmacy, RESPONSE_STREAM)
    first_open = None
    for sent in nudges:
        opened_at = max(sent.timestamp, week_start) + timedelta(seconds=int(response_rng.integers(1, int(RESPONSE_DELAY_DAYS * SECONDS_PER_DAY))))
        acts = response_rng.random() < pharmacy.responsiveness
        closes = response_rng.random() < close_probability
        if opened_at >= end:
            continue
        if acts:
            events.append(EventRecord(timestamp=opened_at, user_id=sent.user_id, pharmacy_id=pharmacy.pharmacy_id, kind=EventKind.NUDGE_OPENED, payload=sent.payload))
            line = OrderLine(sku=sent.payload.target_sku, quantity=1, unit_price=round(pharmacy.spend_scale, 2))
            bought_at = min(opened_at + timedelta(hours=1), end - timedelta(seconds=1))
            orders.append(EventRecord(timestamp=bought_at, user_id=sent.user_id, pharmacy_id=pharmacy.pharmacy_id, kind=EventKind.ORDER, payload=OrderPayload(lines=[line])))
            first_open = opened_at if first_open is None else min(first_open, opened_at)
        elif closes:
            events.append(EventRecord(timestamp=opened_at, user_id=sent.user_id, pharmacy_id=pharmacy.pharmacy_id, kind=EventKind.NUDGE_CLOSED, payload=sent.payload))

    if first_open is not None and uplift_effect != 1.0:
        orders = [_scaled(o, uplift_effect) if o.timestamp >= first_open else o for o in orders]
    return events + orders


def step_week(
    population: List[PharmacyProfile],
    pending_nudges: Iterable[EventRecord],
    week_start: datetime,
    seed: int,
    days: float = 7,
    uplift_effect: float = 1.0,
    close_probability: float = 0.0,
    skus: Optional[List[str]] = None,
) -> List[EventRecord]:
    """
    Events of every pharmacy over [week_start, week_start + days).
    `pending_nudges` are nudge_sent records; those of responders are opened.
    """
    if skus is None:
        n_skus = len(population[0].affinity) if population else 0
        skus = [f"sku{k:03d}" for k in range(n_skus)]
    by_pharmacy = {}
    for nudge in pending_nudges:
        by_pharmacy.setdefault(nudge.pharmacy_id, []).append(nudge)

    weeks = parallel_map(
        lambda p: _pharmacy_week(p, by_pharmacy.get(p.pharmacy_id, []), week_start, seed, days, skus, uplift_effect, close_probability),
        population,
    )
    return sort_events(e for week in weeks for e in week)


class PharmacySimulator:
    """Generates the pre-experiment history, then advances in steps on request of the engine."""

    def __init__(self, config: SimConfig, population: Optional[List[PharmacyProfile]] = None):
        self.config = config
        self.population = population if population is not None else generate_population(config)
        self.skus = catalog(config)
        self.clock = config.history_start

    def _step(self, start: datetime, days: float, pending) -> List[EventRecord]:
        return step_week(self.population, pending, start, self.config.seed, days, self.config.uplift_effect, self.config.close_probability, self.skus)

    def history(self) -> List[EventRecord]:
        self.clock = self.config.history_start
        return self.advance(self.config.history_end)

    def advance(self, until: datetime, pending_nudges: Iterable[EventRecord] = ()) -> List[EventRecord]:
        """Events over [clock, until) in steps of at most one week; pending nudges join the first step."""
        pending = list(pending_nudges)
        events = []
        while self.clock < until:
            days = min(7.0, (until - self.clock).total_seconds() / SECONDS_PER_DAY)
            events.extend(self._step(self.clock, days, pending))
            pending = []
            self.clock = self.clock + timedelta(days=days)
        if pending:
            logger.warning("%d pending nudges dropped: simulator is already at %s", len(pending), self.clock.isoformat())
        return sort_events(events)

    def population_dict(self) -> list:
        return [p.dict() for p in self.population]

    def to_file(self, path) -> None:
        state = {"config": json.loads(self.config.json()), "pharmacies": self.population_dict()}
        with open(path, "w") as file:
            json.dump(state, file, indent=4)

    @classmethod
    def from_file(cls, path) -> "PharmacySimulator":
        with open(path, "r") as file:
            state = json.load(file)
        simulator = cls(SimConfig.parse_obj(state["config"]), [PharmacyProfile.parse_obj(p) for p in state["pharmacies"]])
        simulator.clock = simulator.config.history_end
        return simulator
