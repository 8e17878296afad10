"""Reference adapter: a Segment Anything model behind the sammpa wire protocol.

Not part of the installed package and not exercised by the test-suite; it
needs ``torch``, the ``segment_anything`` package and a checkpoint.

    python docs/sam_adapter.py --checkpoint sam_vit_b.pth --model vit_b \
        --kind segmenter --out-dir /tmp/sam-masks

then point the pipeline at it with
``segmentation_address: "python docs/sam_adapter.py --checkpoint ..."``.
With ``--kind embedder`` the same script answers ``embed`` requests with the
image encoder output average-pooled to a 256-d vector.
"""
import argparse
import json
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from sammpa.register.field import read_grid


def load_rgb(path):
    return np.asarray(Image.open(path).convert("RGB"))


def logits_to_low_res(grid, size=256):
    """SAM takes 256x256 mask logits aligned with its padded square input."""
    h, w = grid.shape
    scale = size / max(h, w)
    img = Image.fromarray(grid.astype(np.float32), mode="F")
    img = img.resize((max(1, round(w * scale)), max(1, round(h * scale))), Image.BILINEAR)
    out = np.full((size, size), -20.0, np.float32)
    arr = np.asarray(img)
    out[:arr.shape[0], :arr.shape[1]] = arr
    return out[None]


class Adapter:
    def __init__(self, kind, checkpoint, model, out_dir, device):
        import torch  # noqa: F401
        from segment_anything import SamPredictor, sam_model_registry

        sam = sam_model_registry[model](checkpoint=checkpoint).to(device)
        self.predictor = SamPredictor(sam)
        self.kind = kind
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.n = 0

    def hello(self):
        msg = {"op": "hello", "kind": self.kind}
        if self.kind == "embedder":
            msg["dim"] = 256
        return msg

    def embed(self, msg):
        self.predictor.set_image(load_rgb(msg["image"]))
        feats = self.predictor.get_image_embedding()[0]  # (256, 64, 64)
        return {"vector": feats.mean(dim=(1, 2)).cpu().numpy().astype(float).tolist()}

    def segment(self, msg):
        self.predictor.set_image(load_rgb(msg["image"]))
        pts = np.array([[x, y] for x, y, _ in msg["points"]], np.float32)
        labels = np.array([lab for _, _, lab in msg["points"]], np.int32)
        kw = {}
        if msg.get("mask_logits"):
            kw["mask_input"] = logits_to_low_res(read_grid(msg["mask_logits"])[:, :, 0])
        masks, scores, _ = self.predictor.predict(
            point_coords=pts, point_labels=labels, box=np.array(msg["box"], np.float32),
            multimask_output=True, **kw)
        paths = []
        for m in masks:
            self.n += 1
            p = self.out_dir / f"mask-{self.n}.png"
            Image.fromarray(m.astype(np.uint8) * 255).save(p)
            paths.append(str(p))
        return {"masks": paths, "confidences": [float(s) for s in scores]}

    def handle(self, msg):
        op, rid = msg.get("op"), msg.get("id")
        if op == "hello":
            return self.hello()
        try:
            if op == "embed" and self.kind == "embedder":
                return {"op": "result", "id": rid, **self.embed(msg)}
            if op == "segment" and self.kind == "segmenter":
                return {"op": "result", "id": rid, **self.segment(msg)}
            raise ValueError(f"unsupported op {op!r}")
        except Exception as exc:  # noqa: BLE001
            return {"op": "error", "id": rid, "message": str(exc)}


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--checkpoint", required=True)
    ap.add_argument("--model", default="vit_b")
    ap.add_argument("--kind", choices=["segmenter", "embedder"], default="segmenter")
    ap.add_argument("--out-dir", default="sam-masks")
    ap.add_argument("--device", default="cpu")
    args = ap.parse_args()
    adapter = Adapter(args.kind, args.checkpoint, args.model, args.out_dir, args.device)
    # requests are answered in order; the client tolerates that
    for line in sys.stdin:
        if line.strip():
            print(json.dumps(adapter.handle(json.loads(line))), flush=True)


if __name__ == "__main__":
    main()
