# Files on disk and the command line
#
# Datasets are a JSON manifest plus PFTENSOR payloads with SHA-256 checksums.
# Every CLI command writes config.resolved.json with all defaults filled in.

# %%
import json
import tempfile
from pathlib import Path

from uniprompt.cli import main
from uniprompt.data import SyntheticSpec, generate_synthetic, load_dataset

root = Path(tempfile.mkdtemp(prefix="uniprompt-demo-"))
manifest = generate_synthetic(SyntheticSpec(k=3, train_per_class=8, seed=4), root / "data")
print("splits:", {k: v["count"] for k, v in manifest["splits"].items()})
print("reloaded class names:", load_dataset(root / "data").class_names)

# %% the same steps through the CLI (equivalent to `python -m uniprompt ...`)
small = ["--set", "dataset.synthetic.k=3", "--set", "dataset.synthetic.train_per_class=8", "--set", "train.epochs=5"]
main(["train", "--out", str(root / "run"), "--strategy", "unified", "--shots", "4", *small])
main(["eval", "--out", str(root / "run"), "--strategy", "unified", "--shots", "4", *small])
main(["attn-map", "--out", str(root / "run"), "--strategy", "unified", *small, "--set", "attention.images=[0]"])

resolved = json.loads((root / "run" / "config.resolved.json").read_text())
print("resolved unified hyperparameters:", resolved["strategy"]["hyperparameters"])

# %% a validation failure exits with code 3 and one JSON line on stderr
print("exit code:", main(["train", "--shots", "3", "--out", str(root / "bad")]))
