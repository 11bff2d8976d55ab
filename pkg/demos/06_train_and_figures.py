# Train a small SimpleGrowth autoencoder on the CIFAR-10 fixture, then make the
# reconstruction, interpolation and sampling grids with the CLI.
import sys
from pathlib import Path

from simplegrowth.cli import main
from simplegrowth.data import load_cifar10_bin
from simplegrowth.model import SimpleGrowthConfig, SimpleGrowthModel
from simplegrowth.train import TrainConfig, train_loop

DATA = Path(__file__).resolve().parents[1] / "tests" / "data"
out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out")
iterations = int(sys.argv[2]) if len(sys.argv) > 2 else 100

model = SimpleGrowthModel(SimpleGrowthConfig(channels=(3, 8, 16), latent_dim=32, seed=0))
print(len(model.named_parameters()), "parameter tensors,",
      sum(p.data.size for p in model.parameters()), "weights")

cfg = TrainConfig(max_iterations=iterations, metric_interval=50, eval_sample_count=128, seed=0)
result = train_loop(model, load_cifar10_bin(DATA / "cifar10_train_256.bin"), cfg,
                    eval_dataset=load_cifar10_bin(DATA / "cifar10_test_512.bin"), out_dir=out)
print("first loss", result.losses[0], "last 16 mean", result.running_mse(16))
print((out / "metrics.csv").read_text())

ckpt, test = str(out / "final.ckpt"), str(DATA / "cifar10_test_512.bin")
main(["reconstruct", "--checkpoint", ckpt, "--data", test, "--count", "8", "--out", str(out / "reconstruct.ppm")])
main(["interpolate", "--checkpoint", ckpt, "--data", test, "--indices", "3,9", "--out", str(out / "interpolate.ppm")])
main(["sample", "--checkpoint", ckpt, "--count", "16", "--out", str(out / "sample.ppm")])
main(["eval", "--checkpoint", ckpt, "--data", test, "--count", "256"])
print("grids in", out)
