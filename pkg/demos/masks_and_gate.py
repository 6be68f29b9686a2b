"""Print a prefix mask next to a causal one, then sweep the memory gate.

    python demos/masks_and_gate.py
"""
import numpy as np

from camlm.attention import make_causal_mask, make_prefix_mask
from camlm.cam import update
from camlm.tensor import Tensor


def show(mask: np.ndarray) -> str:
    return "\n".join(" ".join("x" if v else "." for v in row) for row in mask)


def main():
    P, size = 3, 7
    print(f"prefix mask, {P} prefix positions out of {size}:")
    print(show(make_prefix_mask(P, size)))
    print("\ncausal mask:")
    print(show(make_causal_mask(size)))

    new, old = Tensor(np.ones((1, 4))), Tensor(np.zeros((1, 4)))
    print("\nalpha   share of the new memory")
    for alpha in (-20.0, -2.0, 0.0, 2.0, 20.0):
        print(f"{alpha:6.1f}  {update(new, old, Tensor([alpha])).data[0, 0]:.6f}")


if __name__ == "__main__":
    main()
