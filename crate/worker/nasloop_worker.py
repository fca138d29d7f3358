#!/usr/bin/env python3
"""Evaluation worker: reads one JSON request on stdin, writes one JSON reply on stdout.

Requests come from the nasloop evaluation gateway. `validate` instantiates the
candidate's `Net` and checks the output shape of a forward pass on a zero
batch; `train_eval` trains the model for the configured number of epochs and
reports top-1 accuracy on the test split.

Standard output carries only the reply; everything else goes to stderr.
Candidate code runs in a fresh module namespace inside this process. That is
not a security sandbox: containment relies on the gateway running each
request in its own process with a timeout.

Environment:
    NASLOOP_DATA_DIR   dataset root (default: ./data under the working directory)
    NASLOOP_DOWNLOAD   set to 1 to download missing datasets
    NASLOOP_SCRATCH    working directory chosen by the gateway
"""

import argparse
import json
import os
import random
import sys
import traceback
import types

PROTOCOL_VERSION = "1"
MAX_MESSAGE_CHARS = 2000

NORMALIZATION = {
    "cifar10": ((0.4914, 0.4822, 0.4465), (0.2470, 0.2435, 0.2616)),
    "cifar100": ((0.5071, 0.4865, 0.4409), (0.2673, 0.2564, 0.2762)),
}
IMAGENET_STATS = ((0.485, 0.456, 0.406), (0.229, 0.224, 0.225))


class WorkerFailure(Exception):
    def __init__(self, kind, message):
        super().__init__(message)
        self.kind = kind
        self.message = message


def tail(text, limit=MAX_MESSAGE_CHARS):
    text = text.strip()
    return text if len(text) <= limit else text[-limit:]


def exception_text(exc):
    lines = traceback.format_exception_only(type(exc), exc)
    return "".join(lines).strip()


def seed_everything(seed):
    import numpy as np
    import torch

    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True, warn_only=True)
    if torch.backends.cudnn.is_available():
        torch.backends.cudnn.benchmark = False
        torch.backends.cudnn.deterministic = True


def load_model(source):
    import torch

    module = types.ModuleType("candidate")
    module.__dict__["__builtins__"] = __builtins__
    try:
        code = compile(source, "<candidate>", "exec")
    except SyntaxError as exc:
        raise WorkerFailure("validation", f"SyntaxError: {exc.msg} (line {exc.lineno})")
    try:
        exec(code, module.__dict__)
        net = module.__dict__.get("Net")
        if net is None:
            raise WorkerFailure("validation", "candidate defines no class named Net")
        model = net()
    except WorkerFailure:
        raise
    except Exception as exc:
        raise WorkerFailure("validation", exception_text(exc))
    if not isinstance(model, torch.nn.Module):
        raise WorkerFailure("validation", f"Net() returned {type(model).__name__}, not a torch.nn.Module")
    return model


def check_shape(model, dataset, device):
    import torch

    shape = (2, dataset["input_channels"], dataset["input_height"], dataset["input_width"])
    expected = (2, dataset["num_classes"])
    model.eval()
    try:
        with torch.no_grad():
            out = model(torch.zeros(shape, device=device))
    except Exception as exc:
        raise WorkerFailure("validation", exception_text(exc))
    got = tuple(getattr(out, "shape", ()))
    if got != expected:
        raise WorkerFailure("validation", f"output shape {got} does not match expected {expected}")


def stratified_indices(targets, fraction, generator):
    """Seeded per-class sample keeping class proportions; at least one per class."""
    import torch

    targets = torch.as_tensor(targets)
    if fraction >= 1.0:
        return torch.arange(len(targets))
    picked = []
    for c in torch.unique(targets).tolist():
        idx = torch.nonzero(targets == c).flatten()
        take = max(1, round(fraction * len(idx)))
        perm = torch.randperm(len(idx), generator=generator)[:take]
        picked.append(idx[perm])
    return torch.sort(torch.cat(picked)).values


def synthetic_split(dataset, n, seed):
    """Learnable images for tests: a fixed per-class colour plus pixel noise.
    Colours survive cropping and flipping, so augmentation keeps the signal."""
    import torch

    g = torch.Generator().manual_seed(seed)
    c, h, w, k = dataset["input_channels"], dataset["input_height"], dataset["input_width"], dataset["num_classes"]
    colours = torch.rand((k, c, 1, 1), generator=torch.Generator().manual_seed(12345))
    labels = torch.arange(n) % k
    images = 0.7 * colours[labels] + 0.3 * torch.rand((n, c, h, w), generator=g)
    return images, labels


def load_splits(dataset, data_dir, download):
    """Returns (train, test), each a pair (images, labels) or a torchvision dataset."""
    import torch
    import torchvision

    name = dataset["name"].lower().replace("-", "")
    if name.startswith("synthetic"):
        return synthetic_split(dataset, 2000, 1), synthetic_split(dataset, 500, 2)
    if name in ("cifar10", "cifar100"):
        cls = torchvision.datasets.CIFAR10 if name == "cifar10" else torchvision.datasets.CIFAR100
        splits = []
        for train in (True, False):
            try:
                ds = cls(root=data_dir, train=train, download=download)
            except RuntimeError as exc:
                raise WorkerFailure("runtime", f"{name} not found under {data_dir} ({exc}); set NASLOOP_DOWNLOAD=1 to fetch it")
            images = torch.from_numpy(ds.data).permute(0, 3, 1, 2).float().div_(255.0)
            splits.append((images, torch.as_tensor(ds.targets)))
        return splits[0], splits[1]
    if name == "imagenette":
        from torchvision import transforms

        root = os.path.join(data_dir, "imagenette2-160")
        if not os.path.isdir(root):
            if not download:
                raise WorkerFailure("runtime", f"imagenette not found under {data_dir}; set NASLOOP_DOWNLOAD=1 to fetch it")
            torchvision.datasets.Imagenette(data_dir, split="train", size="160px", download=True)
        side = dataset["input_height"]
        tf = transforms.Compose([transforms.Resize(side), transforms.CenterCrop(side), transforms.ToTensor()])
        return (
            torchvision.datasets.ImageFolder(os.path.join(root, "train"), transform=tf),
            torchvision.datasets.ImageFolder(os.path.join(root, "val"), transform=tf),
        )
    raise WorkerFailure("runtime", f"unknown dataset {dataset['name']!r}")


def as_dataset(split, fraction, generator):
    import torch
    from torch.utils.data import Subset, TensorDataset

    if isinstance(split, tuple):
        images, labels = split
        idx = stratified_indices(labels, fraction, generator)
        return TensorDataset(images[idx], labels[idx])
    idx = stratified_indices(split.targets, fraction, generator)
    return Subset(split, idx.tolist())


def augment(batch, aug, generator):
    import torch

    if aug.get("random_crop_pad", True):
        pad = int(aug.get("crop_padding", 4))
        if pad > 0:
            n, _, h, w = batch.shape
            padded = torch.nn.functional.pad(batch, (pad, pad, pad, pad))
            dx = torch.randint(0, 2 * pad + 1, (n,), generator=generator)
            dy = torch.randint(0, 2 * pad + 1, (n,), generator=generator)
            batch = torch.stack([padded[i, :, dy[i] : dy[i] + h, dx[i] : dx[i] + w] for i in range(n)])
    if aug.get("horizontal_flip", True):
        flip = torch.rand(batch.shape[0], generator=generator) < 0.5
        batch = torch.where(flip[:, None, None, None], batch.flip(3), batch)
    return batch


def normalizer(dataset, aug):
    import torch

    if not aug.get("normalize", True):
        return lambda x: x
    mean, std = NORMALIZATION.get(dataset["name"].lower().replace("-", ""), IMAGENET_STATS)
    c = dataset["input_channels"]
    mean = torch.tensor((list(mean) * c)[:c]).view(1, c, 1, 1)
    std = torch.tensor((list(std) * c)[:c]).view(1, c, 1, 1)
    return lambda x: (x - mean.to(x.device)) / std.to(x.device)


def train_eval(model, request, device, data_dir, download):
    import torch
    from torch.utils.data import DataLoader

    dataset, cfg, seed = request["dataset"], request["train"], request.get("seed", 43)
    aug = cfg.get("augmentation", {})
    train_split, test_split = load_splits(dataset, data_dir, download)
    subset_gen = torch.Generator().manual_seed(seed)
    train_ds = as_dataset(train_split, cfg.get("subset_fraction", 1.0), subset_gen)
    test_ds = as_dataset(test_split, cfg.get("subset_fraction", 1.0), subset_gen)

    batch_size = int(cfg.get("batch_size", 128))
    loader = DataLoader(train_ds, batch_size=batch_size, shuffle=True, generator=torch.Generator().manual_seed(seed))
    aug_gen = torch.Generator().manual_seed(seed + 1)
    norm = normalizer(dataset, aug)
    epochs = int(cfg.get("epochs", 1))

    model.to(device)
    params = [p for p in model.parameters() if p.requires_grad]
    opt_cfg = cfg.get("optimizer", {})
    optimizer = scheduler = None
    if params:
        optimizer = torch.optim.SGD(
            params,
            lr=float(cfg.get("learning_rate", 0.01)),
            momentum=float(opt_cfg.get("momentum", 0.9)),
            weight_decay=float(opt_cfg.get("weight_decay", 5e-4)),
        )
        if cfg.get("cosine_annealing", True):
            scheduler = torch.optim.lr_scheduler.CosineAnnealingLR(optimizer, T_max=max(1, epochs * len(loader)))
    loss_fn = torch.nn.CrossEntropyLoss()

    for _ in range(epochs):
        model.train()
        for images, labels in loader:
            images = norm(augment(images, aug, aug_gen)).to(device)
            labels = labels.to(device)
            loss = loss_fn(model(images), labels)
            if optimizer is not None:
                optimizer.zero_grad(set_to_none=True)
                loss.backward()
                optimizer.step()
                if scheduler is not None:
                    scheduler.step()
            if not torch.isfinite(loss):
                raise WorkerFailure("runtime", f"training diverged: loss is {loss.item()}")

    model.eval()
    correct = total = 0
    with torch.no_grad():
        for images, labels in DataLoader(test_ds, batch_size=256):
            pred = model(norm(images).to(device)).argmax(dim=1).cpu()
            correct += int((pred == labels).sum())
            total += len(labels)
    if total == 0:
        raise WorkerFailure("runtime", "empty test split")
    return correct / total


def handle(request, device, data_dir, download):
    if request.get("protocol_version") != PROTOCOL_VERSION:
        raise WorkerFailure("runtime", f"unsupported protocol version {request.get('protocol_version')!r}")
    kind = request.get("request_kind")
    if kind not in ("validate", "train_eval"):
        raise WorkerFailure("runtime", f"unknown request_kind {kind!r}")
    if not request.get("source_text", "").strip():
        raise WorkerFailure("validation", "empty source_text")

    seed_everything(int(request.get("seed", 43)))
    model = load_model(request["source_text"])
    if kind == "validate":
        check_shape(model, request["dataset"], "cpu")
        return {"status": "ok"}
    try:
        accuracy = train_eval(model, request, device, data_dir, download)
    except WorkerFailure:
        raise
    except Exception:
        raise WorkerFailure("runtime", tail(traceback.format_exc()))
    return {"status": "ok", "accuracy": accuracy}


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--device", default="cpu", help="cpu, cuda or cuda:N")
    args = parser.parse_args(argv)

    reply_stream = sys.stdout
    sys.stdout = sys.stderr  # candidate prints must not corrupt the reply

    data_dir = os.environ.get("NASLOOP_DATA_DIR", os.path.join(os.getcwd(), "data"))
    download = os.environ.get("NASLOOP_DOWNLOAD") == "1"
    try:
        request = json.loads(sys.stdin.read())
        reply = handle(request, args.device, data_dir, download)
    except WorkerFailure as exc:
        reply = {"status": "error", "error_kind": exc.kind, "message": tail(exc.message)}
    except json.JSONDecodeError as exc:
        reply = {"status": "error", "error_kind": "runtime", "message": f"request is not JSON: {exc}"}
    except Exception:
        reply = {"status": "error", "error_kind": "runtime", "message": tail(traceback.format_exc())}
    reply["protocol_version"] = PROTOCOL_VERSION
    reply_stream.write(json.dumps(reply) + "\n")
    reply_stream.flush()
    return 0


if __name__ == "__main__":
    sys.exit(main())
