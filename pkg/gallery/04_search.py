"""Coarse-then-fine search over layer permutations.

A cheap surrogate scores each permutation by how many positions agree with a
hidden target, which makes the search behaviour easy to follow. Swap in
ToyTaskEvaluator to score candidates by actually training a model.

Run: python3 gallery/04_search.py
"""
from mpt.search import HammingSurrogate, SearchLedger, SearchPolicy, SearchSpace, enumerate_search, run_search

target = (3, 0, 4, 1, 2)
ledger = SearchLedger()
policy = SearchPolicy(coarse_budget=20, fine_budget=20, top_m=2, neighbors_per_candidate=10, seed=0)
ranked = run_search(SearchSpace(5), policy, HammingSurrogate(target), ledger)

print(f"evaluated {len(ledger)} of 120 permutations")
for entry in ranked[:5]:
    print(f"  {entry.phase:6s} {list(entry.perm)} score {entry.score:+.0f}")
print("target found" if ranked[0].perm == target else "target missed")

exhaustive = enumerate_search(4, HammingSurrogate((1, 3, 0, 2)))
print(f"exhaustive N=4: {len(exhaustive)} candidates, best {list(exhaustive[0].perm)}")
