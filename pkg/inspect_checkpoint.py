import sys

from src.checkpoint import load_checkpoint
from src.training import format_history_line


def main(path):
    ckpt = load_checkpoint(path)

    print(f"Checkpoint {path} (format v{ckpt.format_version}, {ckpt.dtype})")
    print(f"  Epoch: {ckpt.epoch} | Adam steps: {ckpt.optimizer.get('step')}")
    print(f"  Graph: {len(ckpt.graph['vertex_ids'])} sensors, {len(ckpt.graph.get('edges', []))} edges, "
          f"threshold {ckpt.graph['threshold']} | adjacency {ckpt.config.get('adjacency', 'attention')}")
    print(f"  Data: {ckpt.data} | norm mean={ckpt.norm['mean']:.4f} std={ckpt.norm['std']:.4f}")

    print("Config:")
    for key, value in sorted(ckpt.config.items()):
        print(f"  {key}={value}")

    total = 0
    print("Parameters:")
    for name, arr in ckpt.params.items():
        total += arr.size
        print(f"  {name}: {tuple(arr.shape)}")
    print(f"  total scalars: {total}")

    print(f"History ({len(ckpt.history)} epochs):")
    for record in ckpt.history:
        print(f"  {format_history_line(record)}")


if __name__ == "__main__":
    if len(sys.argv) != 2:
        print("usage: python inspect_checkpoint.py <checkpoint>")
        sys.exit(2)
    main(sys.argv[1])
