"""Token-granularity radix tree holding one worker's KV cache.

Every cached token is its own node. A node's identity is its position in the
tree (parent node + token id), interned to a stable integer key by
:class:`PrefixKeys`, so a token that is evicted and later reloaded keeps the
same key. Eviction policies, the marking set and the clairvoyant oracle all
speak in these keys.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional

from .errors import AdmissionError, ConsistencyError

ROOT = 0


class PrefixKeys:
    """Interns (parent key, token) pairs to stable integer node keys."""

    def __init__(self):
        self._ids: dict[tuple[int, int], int] = {}
        self.parent: list[int] = [-1]
        self.token: list[int] = [-1]

    def child(self, parent: int, token: int) -> int:
        key = self._ids.get((parent, token))
        if key is None:
            key = len(self.parent)
            self._ids[(parent, token)] = key
            self.parent.append(parent)
            self.token.append(token)
        return key

    def path(self, tokens: Iterable[int]) -> list[int]:
        keys, node = [], ROOT
        for tok in tokens:
            node = self.child(node, tok)
            keys.append(node)
        return keys

    def depth(self, key: int) -> int:
        d = 0
        while key != ROOT:
            key = self.parent[key]
            d += 1
        return d

    def __len__(self) -> int:
        return len(self.parent) - 1


@dataclass
class AccessOutcome:
    hits: int = 0
    misses: int = 0
    evicted: list = field(default_factory=list)  # node keys, in eviction order

    @property
    def length(self) -> int:
        return self.hits + self.misses


class RadixCache:
    """A capacity-bounded prefix tree of cached tokens.

    Tokens of a path passed to :meth:`access_path` stay pinned until
    :meth:`release_path`; pins are reference counted so concurrent paths may
    share a prefix.
    """

    def __init__(self, capacity: int, keys: Optional[PrefixKeys] = None):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.keys = keys if keys is not None else PrefixKeys()
        self.last_access: dict[int, int] = {}
        self.clock = 0
        self._children: dict[int, dict[int, int]] = {ROOT: {}}
        self._pins: dict[int, int] = {}
        self._childless: set[int] = set()

    @property
    def size(self) -> int:
        return len(self.last_access)

    def __len__(self) -> int:
        return len(self.last_access)

    def __contains__(self, key: int) -> bool:
        return key in self.last_access

    def contents(self) -> frozenset:
        return frozenset(self.last_access)

    def is_pinned(self, key: int) -> bool:
        return self._pins.get(key, 0) > 0

    def match_prefix(self, path: Iterable[int]) -> int:
        """Length of the longest cached prefix of ``path``. Read-only."""
        n, children = 0, self._children[ROOT]
        for tok in path:
            key = children.get(tok)
            if key is None:
                break
            n += 1
            children = self._children[key]
        return n

    def unpinned_leaves(self) -> list[int]:
        pins = self._pins
        return [k for k in self._childless if not pins[k]]

    def leaf_tokens(self) -> set:
        """Token ids of the unpinned leaves."""
        return {self.keys.token[k] for k in self.unpinned_leaves()}

    def access_path(
        self,
        path: Iterable[int],
        policy,
        on_token: Optional[Callable[[int], None]] = None,
    ) -> AccessOutcome:
        """Walk ``path`` token by token, loading misses and evicting via ``policy``.

        ``policy`` must provide ``observe(key)`` (called once per token, before
        the cache is consulted) and ``choose_victim(leaves, cache)``.
        ``on_token(key)`` is called before each token is processed.
        """
        out = AccessOutcome()
        node = ROOT
        pinned: list[int] = []
        keys, pins, stamp = self.keys, self._pins, self.last_access
        try:
            for tok in path:
                key = keys.child(node, tok)
                if on_token is not None:
                    on_token(key)
                policy.observe(key)
                self.clock += 1
                if key in stamp:
                    out.hits += 1
                else:
                    if len(stamp) >= self.capacity:
                        out.evicted.append(self._evict_for(policy))
                    self._load(key, node)
                    out.misses += 1
                stamp[key] = self.clock
                pins[key] += 1
                pinned.append(key)
                node = key
        except AdmissionError:
            for key in pinned:
                pins[key] -= 1
            raise
        if not pinned:
            raise ValueError("access_path needs a non-empty path")
        return out

    def insert(self, path: Iterable[int]) -> int:
        """Load any missing tokens of ``path`` without eviction or pinning; returns loads."""
        node, loaded = ROOT, 0
        for tok in path:
            key = self.keys.child(node, tok)
            if key not in self.last_access:
                if len(self.last_access) >= self.capacity:
                    raise AdmissionError("insert would exceed capacity")
                self._load(key, node)
                self.last_access[key] = 0
                loaded += 1
            node = key
        return loaded

    def evict(self, key: int) -> None:
        """Remove an unpinned leaf."""
        if key not in self._childless or self._pins[key]:
            raise ValueError(f"node {key} is not an unpinned leaf")
        self._remove(key)

    def release_path(self, path: Iterable[int]) -> None:
        keys = []
        children = self._children[ROOT]
        for tok in path:
            key = children.get(tok)
            if key is None or not self._pins[key]:
                raise ValueError("release_path on a path that is not pinned")
            keys.append(key)
            children = self._children[key]
        if not keys:
            raise ValueError("release_path needs a non-empty path")
        for key in keys:
            self._pins[key] -= 1

    def _evict_for(self, policy) -> int:
        leaves = self.unpinned_leaves()
        if not leaves:
            raise AdmissionError(
                f"cache full ({self.size}/{self.capacity}) and every leaf is pinned; "
                "batch size times max path length exceeds capacity"
            )
        victim = policy.choose_victim(leaves, self)
        if victim not in self._childless or self._pins[victim]:
            raise ConsistencyError(f"policy chose {victim}, which is not an unpinned leaf")
        self._remove(victim)
        return victim

    def _load(self, key: int, parent: int) -> None:
        self._children[parent][self.keys.token[key]] = key
        self._childless.discard(parent)
        self._children[key] = {}
        self._childless.add(key)
        self._pins[key] = 0

    def _remove(self, key: int) -> None:
        parent = self.keys.parent[key]
        siblings = self._children[parent]
        del siblings[self.keys.token[key]]
        if parent != ROOT and not siblings:
            self._childless.add(parent)
        del self._children[key]
        del self._pins[key]
        del self.last_access[key]
        self._childless.discard(key)

    def dump(self) -> str:
        """Preorder listing, one ``token depth last_access pinned`` line per node."""
        lines = []
        stack = [(k, 1) for _, k in sorted(self._children[ROOT].items(), reverse=True)]
        while stack:
            key, depth = stack.pop()
            lines.append(f"{self.keys.token[key]} {depth} {self.last_access[key]} {int(self.is_pinned(key))}")
            stack.extend((k, depth + 1) for _, k in sorted(self._children[key].items(), reverse=True))
        return "\n".join(lines) + ("\n" if lines else "")

    def membership_dump(self) -> str:
        """Like :meth:`dump` without timestamps or pins (cache membership only)."""
        return "\n".join(" ".join(line.split()[:2]) for line in self.dump().splitlines())

    def digest(self, membership_only: bool = False) -> str:
        text = self.membership_dump() if membership_only else self.dump()
        return hashlib.sha256(text.encode()).hexdigest()

    def check_invariants(self) -> None:
        """Full traversal check of the tree, size and leaf bookkeeping."""
        if self.size > self.capacity:
            raise ConsistencyError("size exceeds capacity")
        seen = 0
        stack = [ROOT]
        while stack:
            node = stack.pop()
            for tok, key in self._children[node].items():
                if self.keys.parent[key] != node or self.keys.token[key] != tok:
                    raise ConsistencyError(f"node {key} linked under the wrong parent")
                if key not in self.last_access:
                    raise ConsistencyError(f"node {key} reachable but not cached")
                seen += 1
                stack.append(key)
        if seen != self.size:
            raise ConsistencyError(f"{self.size} cached nodes but {seen} reachable from root")
        childless = {k for k in self.last_access if not self._children[k]}
        if childless != self._childless:
            raise ConsistencyError("leaf bookkeeping out of sync")
