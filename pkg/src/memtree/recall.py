"""Answer generation over the tree: fast mode and router-gated agentic recall."""

from __future__ import annotations

import logging
import math
import re
import threading
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Protocol, Sequence

from memtree.listener import CompletionClient, ListenerTransportError, fill_template
from memtree.schema import PersonaTree, serialize_tree

log = logging.getLogger(__name__)

FAST = "fast"
AGENTIC = "agentic"

TREE_HEADER = "[PersonaTree]"
RETRIEVED_HEADER = "[Retrieved Context]"
QUERY_HEADER = "[Query]"

DEFAULT_DETAIL_MARKERS = (
    "more detail",
    "more details",
    "tell me more",
    "in detail",
    "elaborate",
    "specifically",
    "exactly what",
    "remind me",
    "what did i say",
    "what did i tell you",
    "do you remember",
    "earlier you",
    "last time",
)

STOPWORDS = frozenset(
    """
    a about above after again against all also am an and any are as at be because been before being below
    between both but by can could did do does doing down during each few for from further had has have having
    he her here hers herself him himself his how i if in into is it its itself just me more most my myself no
    nor not now of off on once only or other our ours ourselves out over own same she should so some such than
    that the their theirs them themselves then there these they this those through to too under until up very
    was we were what when where which while who whom why will with would you your yours yourself yourselves
    tell give please think know like want need make maybe something anything things thing really much many
    well good best better suggest recommend recommendation recommendations idea ideas help could would should
    might shall doesn't don't i'm i've you're it's that's what's let's get got going right sure
    """.split()
)

_WORD_RE = re.compile(r"[a-z0-9]+(?:'[a-z]+)?")


def tokenize(text: str) -> list[str]:
    return _WORD_RE.findall(text.lower())


def content_terms(text: str) -> list[str]:
    return [t for t in tokenize(text) if len(t) >= 4 and t not in STOPWORDS]


# -- retrieval ---------------------------------------------------------------


@dataclass(frozen=True)
class Snippet:
    chunk_id: str
    text: str
    score: float
    query_index: int = 0


class Retriever(Protocol):
    def index(self, chunks: Iterable[tuple[str, str]]) -> None: ...

    def search(self, query: str, k: int) -> list[Snippet]: ...


class Reranker(Protocol):
    def score(self, query: str, text: str) -> float: ...


class BM25Retriever:
    """Okapi BM25 over (chunk_id, text) pairs.

    The index is immutable once built, so concurrent searches are safe.
    """

    def __init__(self, k1: float = 1.2, b: float = 0.75) -> None:
        self.k1 = k1
        self.b = b
        self.ids: list[str] = []
        self.texts: dict[str, str] = {}
        self._tfs: list[Counter] = []
        self._lens: list[int] = []
        self._df: Counter = Counter()
        self._avgdl = 0.0
        self.search_calls = 0
        self._calls_lock = threading.Lock()

    def index(self, chunks: Iterable[tuple[str, str]]) -> None:
        self.ids, self._tfs, self._lens = [], [], []
        self.texts = {}
        self._df = Counter()
        for cid, text in chunks:
            if cid in self.texts:
                raise ValueError(f"duplicate chunk id {cid!r}")
            toks = tokenize(text)
            tf = Counter(toks)
            self.ids.append(cid)
            self.texts[cid] = text
            self._tfs.append(tf)
            self._lens.append(len(toks))
            self._df.update(tf.keys())
        self._avgdl = sum(self._lens) / len(self._lens) if self._lens else 0.0

    def idf(self, term: str) -> float:
        n = len(self.ids)
        df = self._df.get(term, 0)
        return math.log(1.0 + (n - df + 0.5) / (df + 0.5))

    def _score_tf(self, q_terms: Sequence[str], tf: Mapping[str, int], dl: int) -> float:
        if not self._avgdl:
            return 0.0
        norm = self.k1 * (1 - self.b + self.b * dl / self._avgdl)
        total = 0.0
        for term in q_terms:
            f = tf.get(term, 0)
            if f:
                total += self.idf(term) * f * (self.k1 + 1) / (f + norm)
        return total

    def score(self, query: str, text: str) -> float:
        """BM25 of an arbitrary text against the query, using corpus statistics."""
        toks = tokenize(text)
        return self._score_tf(tokenize(query), Counter(toks), len(toks))

    def search(self, query: str, k: int) -> list[Snippet]:
        with self._calls_lock:
            self.search_calls += 1
        q_terms = tokenize(query)
        scored = [
            (self._score_tf(q_terms, tf, dl), cid)
            for cid, tf, dl in zip(self.ids, self._tfs, self._lens)
        ]
        scored = [(s, cid) for s, cid in scored if s > 0]
        scored.sort(key=lambda item: (-item[0], item[1]))
        return [Snippet(cid, self.texts[cid], s) for s, cid in scored[:k]]


def retrieve_parallel(
    retriever: Retriever, queries: Sequence[str], k: int = 4, *, workers: int | None = None
) -> list[Snippet]:
    """Union of per-query top-k hits, each tagged with its query index.

    Repeated query strings are searched once. The pool is sorted by
    (query index, -score, chunk id), so its content and order do not depend
    on how the searches were scheduled. ``workers=1`` runs sequentially.
    """
    unique: list[tuple[int, str]] = []
    seen: set[str] = set()
    for i, q in enumerate(queries):
        if q not in seen:
            seen.add(q)
            unique.append((i, q))

    def run(item: tuple[int, str]) -> list[Snippet]:
        qi, q = item
        return [Snippet(s.chunk_id, s.text, s.score, qi) for s in retriever.search(q, k)]

    if workers == 1 or len(unique) <= 1:
        batches = [run(item) for item in unique]
    else:
        with ThreadPoolExecutor(max_workers=workers or len(unique)) as pool:
            batches = list(pool.map(run, unique))
    out = [s for batch in batches for s in batch]
    out.sort(key=lambda s: (s.query_index, -s.score, s.chunk_id))
    return out


@dataclass(frozen=True)
class FusedContext:
    snippets: tuple[Snippet, ...] = ()

    @property
    def total_chars(self) -> int:
        return sum(len(s.text) for s in self.snippets)

    def render(self) -> str:
        return "\n".join(f"({s.chunk_id}) {s.text}" for s in self.snippets)


def rerank_fuse(
    q: str,
    pool: Sequence[Snippet],
    limit: int = 4,
    *,
    reranker: Reranker | None = None,
    budget: int = 4000,
) -> FusedContext:
    """Deduplicate by chunk id, rescore against the original query, and cut
    to ``limit`` snippets and ``budget`` characters.

    Without a reranker the pooled retrieval scores are kept. Snippets that do
    not fit the remaining character budget are skipped, not truncated.
    """
    best: dict[str, Snippet] = {}
    for s in pool:
        cur = best.get(s.chunk_id)
        if cur is None or (s.score, -s.query_index) > (cur.score, -cur.query_index):
            best[s.chunk_id] = s
    rescored = [
        Snippet(s.chunk_id, s.text, reranker.score(q, s.text) if reranker else s.score, s.query_index)
        for s in best.values()
    ]
    rescored.sort(key=lambda s: (-s.score, s.chunk_id))
    kept: list[Snippet] = []
    used = 0
    for s in rescored:
        if len(kept) >= limit:
            break
        if used + len(s.text) > budget:
            continue
        kept.append(s)
        used += len(s.text)
    return FusedContext(tuple(kept))


# -- routing -----------------------------------------------------------------


@dataclass(frozen=True)
class RouteDecision:
    mode: str
    reason: str


@dataclass(frozen=True)
class RecallConfig:
    expansions: int = 3
    k: int = 4
    fusion_limit: int = 4
    fusion_budget: int = 4000
    router: str = "heuristic"
    detail_markers: tuple[str, ...] = DEFAULT_DETAIL_MARKERS

    def __post_init__(self) -> None:
        if self.k < 1 or self.expansions < 1 or self.fusion_limit < 1:
            raise ValueError("k, expansions and fusion_limit must be at least 1")
        if self.fusion_budget <= 0:
            raise ValueError("fusion_budget must be positive")
        if self.router not in ("heuristic", "llm"):
            raise ValueError("router must be 'heuristic' or 'llm'")


# words that only point at the profile owner; they never signal missing memory
PROFILE_REFERENTS = frozenset({"user", "user's", "users", "person", "person's", "profile", "currently", "current"})


def tree_vocabulary(tree: PersonaTree) -> set[str]:
    """Words in leaf values plus the words of every schema slot name."""
    vocab: set[str] = set()
    for text in tree.values.values():
        vocab.update(tokenize(text))
    for path in tree.schema.leaves:
        for seg in path.segments:
            vocab.update(tokenize(seg.replace("_", " ")))
    return vocab


def _covered(term: str, prefixes: set[str]) -> bool:
    # a shared five-letter prefix counts as a match (diet/dietary, allergic/allergies)
    return term[:5] in prefixes


def heuristic_route(q: str, tree: PersonaTree, markers: Iterable[str] = DEFAULT_DETAIL_MARKERS) -> RouteDecision:
    lowered = " ".join(tokenize(q))
    for marker in markers:
        if re.search(rf"(?<![a-z0-9']){re.escape(marker)}(?![a-z0-9'])", lowered):
            return RouteDecision(AGENTIC, f"detail request marker {marker!r}")
    prefixes: set[str] = set()
    for word in tree_vocabulary(tree):
        prefixes.add(word[:4])
        prefixes.add(word[:5])
    missing = [t for t in content_terms(q) if t not in PROFILE_REFERENTS and not _covered(t, prefixes)]
    if missing:
        return RouteDecision(AGENTIC, f"terms not covered by memory: {', '.join(sorted(set(missing)))}")
    return RouteDecision(FAST, "query covered by memory")


ROUTER_PROMPT = """\
Decide whether the question below can be answered from the user profile alone.
Answer "yes" if the profile is enough, "no" if specific past dialogue details must be retrieved.
Answer with a single word: yes or no.

User profile:
{tree}

Question: {q}
"""


def route(q: str, tree: PersonaTree, cfg: RecallConfig | None = None, client: CompletionClient | None = None) -> RouteDecision:
    cfg = cfg or RecallConfig()
    if cfg.router == "llm" and client is not None:
        prompt = fill_template(ROUTER_PROMPT, tree=serialize_tree(tree, "prompt_compact"), q=q)
        try:
            reply = client.complete(prompt, key=f"route:{q}").strip().lower()
        except ListenerTransportError as exc:
            fallback = heuristic_route(q, tree, cfg.detail_markers)
            return RouteDecision(fallback.mode, f"router unavailable ({exc}); heuristic: {fallback.reason}")
        if reply.startswith("yes"):
            return RouteDecision(FAST, "llm router: profile sufficient")
        if reply.startswith("no"):
            return RouteDecision(AGENTIC, "llm router: retrieval needed")
        fallback = heuristic_route(q, tree, cfg.detail_markers)
        return RouteDecision(fallback.mode, f"llm router reply unparseable; heuristic: {fallback.reason}")
    return heuristic_route(q, tree, cfg.detail_markers)


# -- query expansion ---------------------------------------------------------

EXPANSION_PROMPT = """\
Rewrite the question into {k} search queries over the user's past conversations.
Each query should emphasize a different attribute dimension of the user, or an aspect the profile below is missing.
Output exactly {k} lines, one query per line, with no numbering.

User profile:
{tree}

Question: {q}
"""


@dataclass(frozen=True)
class Expansion:
    queries: tuple[str, ...]
    degraded: bool = False


def _trunk_label(trunk: str) -> str:
    return " ".join(p for p in trunk.split("_") if not p.isdigit()).lower()


def template_expansions(q: str, tree: PersonaTree, k: int) -> list[str]:
    """Deterministic rewrites, each slanted toward one trunk of the tree."""
    trunks = tree.schema.trunks
    out = []
    for i in range(1, k + 1):
        trunk = trunks[(i - 1) % len(trunks)]
        populated = [p.name.replace("_", " ").lower() for p in tree.leaf_paths() if p.segments[0] == trunk and tree.values[p]]
        focus = ", ".join(populated[:3]) or _trunk_label(trunk)
        out.append(f"{q} [aspect {i}: {_trunk_label(trunk)}; {focus}]")
    return out


def expand_queries(q: str, tree: PersonaTree, K: int = 3, client: CompletionClient | None = None) -> Expansion:
    """Return the original query followed by ``K`` rewrites.

    Without a client the rewrites come from a fixed template. A failing
    client degrades to the original query alone.
    """
    if K < 1:
        raise ValueError("K must be at least 1")
    if client is None:
        return Expansion((q, *template_expansions(q, tree, K)))
    prompt = fill_template(EXPANSION_PROMPT, k=str(K), tree=serialize_tree(tree, "prompt_compact"), q=q)
    try:
        reply = client.complete(prompt, key=f"expand:{q}")
    except ListenerTransportError as exc:
        log.warning("query expansion unavailable: %s", exc)
        return Expansion((q,), degraded=True)
    lines = [ln.strip().lstrip("-*0123456789.) ").strip() for ln in reply.split("\n")]
    rewrites: list[str] = []
    for ln in lines:
        if ln and ln != q and ln not in rewrites:
            rewrites.append(ln)
    for filler in template_expansions(q, tree, K):
        if len(rewrites) >= K:
            break
        if filler not in rewrites:
            rewrites.append(filler)
    return Expansion((q, *rewrites[:K]))


# -- context assembly --------------------------------------------------------


def fast_context(tree: PersonaTree, q: str) -> str:
    return f"{TREE_HEADER}\n{serialize_tree(tree, 'prompt_compact')}\n{QUERY_HEADER}\n{q}"


def fused_block(fused: FusedContext) -> str:
    return f"{RETRIEVED_HEADER}\n{fused.render()}\n"


def build_context(tree: PersonaTree, q: str, fused: FusedContext | None = None) -> str:
    """The fast context, with the retrieved block spliced in before the query
    when ``fused`` is given."""
    if fused is None:
        return fast_context(tree, q)
    compact = serialize_tree(tree, "prompt_compact")
    return f"{TREE_HEADER}\n{compact}\n{fused_block(fused)}{QUERY_HEADER}\n{q}"


ANSWER_PREAMBLE = "You are a personalized assistant. Use the user's long-term memory below to answer the query.\n\n"
EVAL_INSTRUCTION = "Answer with the letter of the single best option only."


def format_options(options: Mapping[str, str]) -> str:
    return "\n".join(f"({label}) {text}" for label, text in sorted(options.items()))


def answer_prompt(q: str, tree: PersonaTree, fused: FusedContext | None = None, options: Mapping[str, str] | None = None) -> str:
    prompt = ANSWER_PREAMBLE + build_context(tree, q, fused)
    if options:
        prompt += f"\n[Options]\n{format_options(options)}\n{EVAL_INSTRUCTION}"
    return prompt


def answer(
    client: CompletionClient,
    q: str,
    tree: PersonaTree,
    fused: FusedContext | None = None,
    options: Mapping[str, str] | None = None,
) -> str:
    """One generation call over the tree context (plus retrieved evidence)."""
    return client.complete(answer_prompt(q, tree, fused, options), key=q)


@dataclass
class RecallResult:
    answer: str
    decision: RouteDecision
    context: str
    expansion: Expansion | None = None
    fused: FusedContext | None = None
    search_calls: int = 0


@dataclass
class RecallEngine:
    """Wires the router, expansion, retrieval and answer steps together."""

    tree: PersonaTree
    retriever: Retriever | None
    answerer: CompletionClient
    cfg: RecallConfig = field(default_factory=RecallConfig)
    expander: CompletionClient | None = None
    router_client: CompletionClient | None = None
    reranker: Reranker | None = None

    def decide(self, q: str, mode: str = "auto") -> RouteDecision:
        if mode == FAST:
            return RouteDecision(FAST, "forced fast mode")
        if mode == AGENTIC:
            return RouteDecision(AGENTIC, "forced agentic mode")
        return route(q, self.tree, self.cfg, self.router_client)

    def gather(self, q: str) -> tuple[Expansion, FusedContext]:
        expansion = expand_queries(q, self.tree, self.cfg.expansions, self.expander)
        if self.retriever is None:
            return expansion, FusedContext()
        pool = retrieve_parallel(self.retriever, expansion.queries, self.cfg.k)
        reranker = self.reranker
        if reranker is None and hasattr(self.retriever, "score"):
            reranker = self.retriever
        fused = rerank_fuse(q, pool, self.cfg.fusion_limit, reranker=reranker, budget=self.cfg.fusion_budget)
        return expansion, fused

    def context_for(self, q: str, mode: str = "auto") -> tuple[RouteDecision, str, Expansion | None, FusedContext | None]:
        decision = self.decide(q, mode)
        if decision.mode == FAST:
            return decision, build_context(self.tree, q), None, None
        expansion, fused = self.gather(q)
        return decision, build_context(self.tree, q, fused), expansion, fused

    def ask(self, q: str, mode: str = "auto", options: Mapping[str, str] | None = None) -> RecallResult:
        before = getattr(self.retriever, "search_calls", 0)
        decision, context, expansion, fused = self.context_for(q, mode)
        text = answer(self.answerer, q, self.tree, fused, options)
        calls = getattr(self.retriever, "search_calls", 0) - before
        return RecallResult(text, decision, context, expansion, fused, calls)
