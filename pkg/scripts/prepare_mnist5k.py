"""Write the 5000-digit MNIST subset shipped with mlxtend as IDX archives.

Usage: python scripts/prepare_mnist5k.py [dest]   (default: data/mnist5k)
"""

import argparse

from sslpoison.data import load_dataset, write_mnist_subset


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("dest", nargs="?", default="data/mnist5k")
    ap.add_argument("--test-per-class", type=int, default=100)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    write_mnist_subset(args.dest, args.test_per_class, args.seed)
    b = load_dataset("mnist", args.dest)
    print(f"{args.dest}: {len(b.unlabeled)} train, {len(b.test)} test images")


if __name__ == "__main__":
    main()
