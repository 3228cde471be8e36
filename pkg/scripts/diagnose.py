"""Inspect what a trained run extracts: membrane-head quality per class,
class information in pooled features, and arc-only learnability."""
import argparse
import sys
from pathlib import Path

import numpy as np

from latentstain.autodiff import Tensor, no_grad
from latentstain.harness import load_split
from latentstain.lgdt import load_checkpoint
from latentstain.model import ModelGraph
from latentstain.synth import load_manifest


def dice(pred, gt, eps=1.0):
    inter = float((pred * gt).sum())
    return (2 * inter + eps) / (float(pred.sum() + gt.sum()) + eps)


def nearest_centroid_acc(features, labels):
    rng = np.random.default_rng(0)
    order = rng.permutation(len(labels))
    accs = []
    for fold in range(2):
        test_idx = np.zeros(len(labels), dtype=bool)
        test_idx[order[fold::2]] = True
        train_idx = ~test_idx
        cents = np.stack([features[train_idx][labels[train_idx] == c].mean(axis=0)
                          for c in range(4)])
        d = ((features[test_idx][:, None, :] - cents[None]) ** 2).sum(axis=2)
        accs.append((d.argmin(axis=1) == labels[test_idx]).mean())
    return float(np.mean(accs))


def ridge_probe_acc(train_feats, train_labels, test_feats, test_labels, lam=1e-3):
    """Closed-form one-hot ridge regression: what a linear head could reach."""
    x = np.concatenate([train_feats, np.ones((len(train_feats), 1))], axis=1)
    y = np.eye(4)[train_labels]
    w = np.linalg.solve(x.T @ x + lam * np.eye(x.shape[1]), x.T @ y)
    xt = np.concatenate([test_feats, np.ones((len(test_feats), 1))], axis=1)
    return float(((xt @ w).argmax(axis=1) == test_labels).mean())


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--ckpt", required=True)
    ap.add_argument("--manifest", required=True)
    args = ap.parse_args()

    state = load_checkpoint(args.ckpt)
    # rebuild the full training graph to get decoders
    has_mem = any(k.startswith("decoder.membrane") for k in state)
    has_nuc = any(k.startswith("decoder.nuclei") for k in state)
    variant = {(False, False): "C", (True, False): "D", (False, True): "E",
               (True, True): "F"}[(has_nuc, has_mem)]
    g = ModelGraph(variant, seed=0)
    g.load_state(state)
    g.teacher_loaded = True

    manifest = load_manifest(args.manifest)
    data = load_split(manifest, "test")
    train_data = load_split(manifest, "train")
    with no_grad():
        z = g.encode_student(Tensor(data.he))
        z_hat = g.hallucinate(z)
        z_t = g.encode_teacher(Tensor(data.ihc))
        m_hat = g.decode_membrane(z_hat).data if has_mem else None
        fused, _ = g.fuse(z, z_hat)
        logits = g.classify(fused)
        pooled_test = fused.mean(axes=(2, 3)).data
        n_tr = len(train_data.labels)
        pooled_train = np.concatenate([
            g.fuse(*((lambda zz: (zz, g.hallucinate(zz)))(
                g.encode_student(Tensor(train_data.he[i:i + 128])))))[0]
            .mean(axes=(2, 3)).data
            for i in range(0, n_tr, 128)])
        train_logits = np.concatenate([
            g.classify(g.fuse(*((lambda zz: (zz, g.hallucinate(zz)))(
                g.encode_student(Tensor(train_data.he[i:i + 128])))))[0]).data
            for i in range(0, n_tr, 128)])

    test_acc = (logits.data.argmax(axis=1) == data.labels).mean()
    train_acc = (train_logits.argmax(axis=1) == train_data.labels).mean()
    print(f"classifier head: train_acc={train_acc:.3f} test_acc={test_acc:.3f}")
    print(f"ridge probe on pooled fused feats: "
          f"{ridge_probe_acc(pooled_train, train_data.labels, pooled_test, data.labels):.3f}")

    labels = data.labels
    if m_hat is not None:
        print("membrane head, per-class dice (pred>0.5 vs M_gt) and mean(M̂):")
        for c in range(4):
            sel = labels == c
            d = np.mean([dice((m_hat[i] > 0.5).astype(float), data.mask[i])
                         for i in np.where(sel)[0]])
            print(f"  class {c}: dice={d:.3f}  mean_pred={m_hat[sel].mean():.3f} "
                  f" mean_gt={data.mask[sel].mean():.3f}")
        probe = m_hat.reshape(len(labels), -1)
        print(f"class from M̂ map (nearest centroid): "
              f"{nearest_centroid_acc(probe, labels):.3f}")
        probe_gt = data.mask.reshape(len(labels), -1)
        print(f"class from M_gt map (ceiling):       "
              f"{nearest_centroid_acc(probe_gt, labels):.3f}")

    sp = z.data.mean(axis=(2, 3))
    hp = z_hat.data.mean(axis=(2, 3))
    tp = z_t.data.mean(axis=(2, 3))
    print(f"nearest-centroid class acc: student={nearest_centroid_acc(sp, labels):.3f} "
          f"halluc={nearest_centroid_acc(hp, labels):.3f} "
          f"teacher={nearest_centroid_acc(tp, labels):.3f}")
    cos = (hp * tp).sum(1) / np.maximum(np.linalg.norm(hp, axis=1)
                                        * np.linalg.norm(tp, axis=1), 1e-8)
    print(f"pooled cosine(halluc, teacher): mean={cos.mean():.3f}")


if __name__ == "__main__":
    sys.exit(main())
