import numpy as np
import pytest

from gaborsense.oracle import build_reference_model
from gaborsense.synthetic import make_synthetic_images

# Serves the built-in classifier over the stdio wire protocol. Used to
# exercise the external-oracle path against outputs that are known exactly.
SERVE_BUILTIN = '''
import argparse, base64, json, sys
import numpy as np
from gaborsense.oracle import build_reference_model

ap = argparse.ArgumentParser()
ap.add_argument("--seed", type=int, default=0)
ap.add_argument("--fail-after", type=int, default=-1)
ap.add_argument("--error-every", type=int, default=0)
args = ap.parse_args()

model = build_reference_model(args.seed)
d = model.descriptor
remaining = args.fail_after
n_predicts = 0

for line in sys.stdin.buffer:
    msg = json.loads(line)
    if msg["op"] == "meta":
        reply = {"op": "meta", "name": d.name, "width": d.input_width,
                 "height": d.input_height, "channels": d.input_channels,
                 "classes": d.num_classes}
    elif msg["op"] == "predict":
        if remaining == 0:
            sys.exit(3)
        if remaining > 0:
            remaining -= 1
        n_predicts += 1
        if args.error_every and n_predicts % args.error_every == 0:
            reply = {"op": "error", "id": msg["id"], "message": "synthetic failure"}
        else:
            raw = base64.b64decode(msg["data"])
            arr = np.frombuffer(raw, dtype="<f4").astype(np.float64)
            arr = arr.reshape(msg["batch"], msg["height"], msg["width"], msg["channels"])
            probs = model.predict_batch(arr)
            reply = {"op": "predict", "id": msg["id"],
                     "probs": [[float(v) for v in row] for row in probs]}
    else:
        reply = {"op": "error", "id": msg.get("id", 0),
                 "message": "unknown op " + str(msg.get("op"))}
    sys.stdout.buffer.write(json.dumps(reply).encode() + b"\\n")
    sys.stdout.buffer.flush()
'''


@pytest.fixture(scope="session")
def reference_model():
    return build_reference_model(0)


@pytest.fixture(scope="session")
def small_images():
    return make_synthetic_images(10, 32, 32, seed=5)


@pytest.fixture(scope="session")
def serve_script(tmp_path_factory):
    path = tmp_path_factory.mktemp("oracle") / "serve_builtin.py"
    path.write_text(SERVE_BUILTIN)
    return str(path)


@pytest.fixture(scope="session")
def integer_images():
    """Integer-valued pixels survive the float32 wire encoding exactly."""
    rng = np.random.default_rng(31)
    return rng.integers(0, 256, size=(6, 32, 32, 3)).astype(np.float64)
