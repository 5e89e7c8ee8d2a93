"""PCA share, K-Means purity and centroid recovery on planted difference vectors across noise levels."""
import argparse

import numpy as np

from routed_steering import elicitation as E


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--dim", type=int, default=128)
    ap.add_argument("--k", type=int, default=6)
    ap.add_argument("--per-cluster", type=int, default=200)
    ap.add_argument("--sigmas", type=float, nargs="+", default=[0.01, 0.02, 0.05, 0.1, 0.2, 0.4])
    args = ap.parse_args()
    d, k, n = args.dim, args.k, args.per_cluster
    print("sigma  top-k PCA  bound  purity  min cos  mean|offdiag|")
    for sigma in args.sigmas:
        rng = np.random.default_rng(0)
        Q, _ = np.linalg.qr(rng.normal(size=(d, d)))
        U = Q[:, :k].T
        X = np.concatenate([U[j] + rng.normal(0, sigma, (n, d)) for j in range(k)])
        labels = np.repeat(np.arange(k), n)
        km = E.kmeans(X, k, seed=0)
        lib = E.build_library(X, km.assignments, layer=1)
        signal = (k - 1) / k
        bound = (signal + k * sigma ** 2) / (signal + d * sigma ** 2)
        print(f"{sigma:5.2f}  {E.pca_report(X).top(k):9.3f}  {bound:5.3f}  {E.cluster_purity(km.assignments, labels):6.3f}"
              f"  {np.abs(lib.vectors @ U.T).max(axis=1).min():7.3f}  {E.mean_abs_offdiag(E.cosine_matrix(lib)):13.3f}")


if __name__ == "__main__":
    main()
