"""
Rule-based item-pair recommendations.

Co-purchased sku pairs are ranked by the revenue they generate together, the top
pairs are kept and filtered by stock, then each treated user gets the pair that
joins an item they buy often with one they never (or rarely) buy.
"""
import logging
from collections import Counter
from datetime import datetime, timedelta
from enum import Enum
from itertools import combinations
from typing import Dict, List, Optional

import networkx as nx
from pydantic import BaseModel, Field, root_validator

from events import EventKind, as_index, between
from utils import NudgeEngineError, read_lines

logger = logging.getLogger(__name__)


class NoEligiblePair(NudgeEngineError):
    def __init__(self, user: str = ""):
        self.user = user
        super().__init__(f"no candidate pair contains a frequently purchased item of user '{user}'")


class Reason(str, Enum):
    NEVER_PURCHASED = "never_purchased"
    INFREQUENT = "infrequent"


class CandidatePair(BaseModel):
    sku_a: str
    sku_b: str
    co_purchase_orders: int = Field(..., ge=0)
    pair_revenue: float = Field(..., ge=0)
    rank: int = Field(..., ge=1)

    class Config:
        allow_mutation = False

    @root_validator(skip_on_failure=True)
    def _ordered(cls, values):
        if not values["sku_a"] < values["sku_b"]:
            raise ValueError(f"pair must be stored lexicographically, got ({values['sku_a']}, {values['sku_b']})")
        return values

    @property
    def skus(self):
        return (self.sku_a, self.sku_b)


class UserItemProfile(BaseModel):
    user_id: str = ""
    counts: Dict[str, int] = {}

    @property
    def total(self) -> int:
        return sum(self.counts.values())

    @property
    def mean_count(self) -> float:
        """Mean count over purchased skus only; 0 for a user without purchases."""
        purchased = [c for c in self.counts.values() if c > 0]
        return sum(purchased) / len(purchased) if purchased else 0.0

    def count(self, sku: str) -> int:
        return self.counts.get(sku, 0)

    def relative_frequency(self, sku: str) -> float:
        total = self.total
        return self.count(sku) / total if total else 0.0

    def is_frequent(self, sku: str) -> bool:
        return self.count(sku) > 0 and self.count(sku) >= self.mean_count


class Recommendation(BaseModel):
    anchor_sku: str
    target_sku: str
    reason: Reason
    rank: int


def load_stock(path) -> set:
    """In-stock skus, one per line; blank lines and '#' comments are ignored."""
    return {line for line in read_lines(path) if not line.startswith("#")}


def co_purchase_graph(orders) -> nx.Graph:
    """Undirected sku graph; edge (a, b) counts the orders holding both and the revenue of their two lines."""
    G = nx.Graph()
    for order in orders:
        revenue = Counter()
        for line in order.payload.lines:
            revenue[line.sku] += line.revenue
        for a, b in combinations(sorted(revenue), 2):
            if G.has_edge(a, b):
                G[a][b]["orders"] += 1
                G[a][b]["revenue"] += revenue[a] + revenue[b]
            else:
                G.add_edge(a, b, orders=1, revenue=revenue[a] + revenue[b])
    return G


def build_candidates(events, stock: Optional[set], as_of: datetime, top_k: int = 100, lookback_days: int = 90) -> List[CandidatePair]:
    index = as_index(events)
    orders = between(index.orders, as_of - timedelta(days=lookback_days), as_of)
    G = co_purchase_graph(orders)

    edges = []
    for a, b, data in G.edges(data=True):
        a, b = sorted((a, b))
        edges.append((a, b, data["orders"], data["revenue"]))
    edges.sort(key=lambda e: (-e[3], -e[2], e[0], e[1]))

    ranked = [
        CandidatePair(sku_a=a, sku_b=b, co_purchase_orders=n, pair_revenue=revenue, rank=i)
        for i, (a, b, n, revenue) in enumerate(edges[:top_k], start=1)
    ]
    if stock is None:
        return ranked
    in_stock = [c for c in ranked if c.sku_a in stock and c.sku_b in stock]
    logger.info("Candidate pairs as of %s: %d co-purchased, %d kept, %d in stock", as_of.isoformat(), len(edges), len(ranked), len(in_stock))
    return in_stock


def build_profile(events, user: str, as_of: datetime, lookback_days: int = 90) -> UserItemProfile:
    index = as_index(events)
    counts = Counter()
    for order in index.user_events(user, as_of - timedelta(days=lookback_days), as_of, kinds={EventKind.ORDER}):
        counts.update(order.payload.skus)
    return UserItemProfile(user_id=user, counts=dict(counts))


def recommend_pair(profile: UserItemProfile, candidates: List[CandidatePair]) -> Recommendation:
    """
    Among candidates joining a frequent item (count >= the user's mean) with an infrequent one,
    prefer targets never purchased (first by rank), otherwise the largest gap in relative
    frequency between anchor and target (ties by rank).
    """
    mean = profile.mean_count
    eligible = []
    for candidate in candidates:
        for anchor, target in (candidate.skus, candidate.skus[::-1]):
            if profile.is_frequent(anchor) and profile.count(target) < mean:
                eligible.append((candidate, anchor, target))
                break

    if not eligible:
        raise NoEligiblePair(profile.user_id)

    never = [e for e in eligible if profile.count(e[2]) == 0]
    if never:
        candidate, anchor, target = min(never, key=lambda e: e[0].rank)
        reason = Reason.NEVER_PURCHASED
    else:
        # Same denominator for every pair: compare count gaps so ties stay exact
        gap = lambda e: profile.count(e[1]) - profile.count(e[2])
        candidate, anchor, target = min(eligible, key=lambda e: (-gap(e), e[0].rank))
        reason = Reason.INFREQUENT
    return Recommendation(anchor_sku=anchor, target_sku=target, reason=reason, rank=candidate.rank)
