"""Regenerate the bundled synthetic fixture under src/popcal/data/fixture/.

50 users, 30 items, 6 genres. Item popularity follows a Zipf-like curve and
the popular head is dominated by Action/Sci-Fi titles; each user has a
"mainstream" taste parameter that sharpens or flattens their sampling
towards the head, so niche and blockbuster users both exist.
"""

from pathlib import Path

import numpy as np

OUT = Path(__file__).resolve().parents[1] / "src" / "popcal" / "data" / "fixture"
GENRES = ["Action", "Comedy", "Drama", "Romance", "Sci-Fi", "Documentary"]
N_USERS, N_ITEMS = 50, 30


def main():
    rng = np.random.Generator(np.random.PCG64(20200922))
    weights = 1.0 / np.arange(1, N_ITEMS + 1) ** 1.1
    items = []
    for i in range(N_ITEMS):
        if i < 8:
            pool = ["Action", "Sci-Fi", "Comedy"]
        elif i < 18:
            pool = ["Comedy", "Drama", "Romance", "Action"]
        else:
            pool = ["Drama", "Documentary", "Romance"]
        k = 1 + int(rng.random() < 0.35)
        items.append(sorted(rng.choice(pool, size=k, replace=False), key=GENRES.index))

    lines = ["item_id,title,genres"]
    for i, g in enumerate(items, 1):
        lines.append(f"{i},Item {i},{'|'.join(g)}")
    (OUT / "items.csv").write_text("\n".join(lines) + "\n")

    lines = ["user_id,item_id,rating,timestamp"]
    t = 1_000_000_000
    for u in range(1, N_USERS + 1):
        taste = rng.uniform(-0.5, 2.5)
        p = weights**taste
        p /= p.sum()
        n = int(rng.integers(6, 15))
        chosen = rng.choice(N_ITEMS, size=n, replace=False, p=p)
        for i in chosen:
            r = int(np.clip(np.round(3.2 + 0.08 * (N_ITEMS - i) / 3 + rng.normal(0, 1)), 1, 5))
            t += int(rng.integers(1, 5000))
            lines.append(f"{u},{i + 1},{r},{t}")
    (OUT / "ratings.csv").write_text("\n".join(lines) + "\n")


if __name__ == "__main__":
    main()
