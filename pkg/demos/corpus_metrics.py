# Scoring a corpus: execution rate, complexity mix, embedding diversity and
# contamination against a held-out evaluation set.

import tempfile
from pathlib import Path

import numpy as np

from semsql import compute_ser, contamination_filter, diversity
from semsql.demo import make_demo_db
from semsql.metrics import complexity_histogram, embed_offline, ngram_set, jaccard
from semsql.synthesis import RationaleTrace, Triple

db = make_demo_db(Path(tempfile.mkdtemp()) / "schools.db")

queries = [
    "SELECT sname FROM satscores ORDER BY AvgScrMath DESC LIMIT 1;",
    "SELECT County, COUNT(CDSCode) FROM schools GROUP BY County;",
    "SELECT s.County, AVG(t.AvgScrMath) FROM schools s JOIN satscores t ON t.cds = s.CDSCode GROUP BY s.County;",
    "SELECT sname FROM satscores WHERE AvgScrMath > (SELECT AVG(AvgScrMath) FROM satscores);",
    "SELECT sname, RANK() OVER (ORDER BY AvgScrMath DESC) FROM satscores;",
    "SELECT nothing FROM schools;",
]

# # Execution rate and complexity

print("SER:", compute_ser(queries, db))
print("levels:", complexity_histogram(queries))

# # Diversity
# Offline embeddings hash character trigrams into 256 buckets and normalize.

v = embed_offline(queries[0])
print("embedding norm:", np.linalg.norm(v), "nonzero buckets:", np.count_nonzero(v))
mean_l2, one_nn = diversity(queries)
print(f"mean pairwise L2 {mean_l2:.3f}, mean nearest-neighbour {one_nn:.3f}")

# Near-copies pull the nearest-neighbour distance down much more than the mean.
padded = queries + [q.replace(";", " ;") for q in queries]
print("with near-copies: mean L2 %.3f, 1-NN %.3f" % diversity(padded))

# # Contamination filter
# Token 8-gram Jaccard against every evaluation pair, removing anything above 0.6.

eval_set = [("Which school has the highest average SAT math score?",
             "SELECT sname FROM satscores ORDER BY AvgScrMath DESC LIMIT 1")]
empty = RationaleTrace.model_construct()
corpus = [
    Triple("Which school has the highest average SAT math score ?", queries[0], empty, sample_id="near"),
    Triple("How many schools are in each county?", queries[1], empty, sample_id="fresh"),
]
q = corpus[0].question
print("question Jaccard:", jaccard(ngram_set(q, 8), ngram_set(eval_set[0][0], 8)))
kept, removed = contamination_filter(corpus, eval_set)
print("kept:", [t.sample_id for t in kept])
print("removed:", [r.to_dict() for r in removed])
