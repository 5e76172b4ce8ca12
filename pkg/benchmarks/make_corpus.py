"""Regenerate the bundled graph corpus under src/numguard/corpus/."""

import json
import os

HERE = os.path.dirname(os.path.abspath(__file__))
OUT = os.path.join(HERE, "..", "src", "numguard", "corpus")


class Builder:
    def __init__(self, name, dtype="f32"):
        self.name = name
        self.dtype = dtype
        self.nodes = []
        self.edges = []
        self.loss = None

    def _add(self, nid, kind, shape, op=None, attrs=None, init=None):
        d = {"id": nid, "kind": kind, "shape": list(shape), "dtype": self.dtype}
        if op:
            d["op"] = op
        if attrs:
            d["attrs"] = attrs
        if init is not None:
            d["init"] = init
        self.nodes.append(d)
        return nid

    def input(self, nid, shape):
        return self._add(nid, "Input", shape)

    def weight(self, nid, shape, init=None):
        return self._add(nid, "Weight", shape, init=init)

    def const(self, nid, shape, init):
        return self._add(nid, "Constant", shape, init=init)

    def op(self, nid, op, srcs, shape, **attrs):
        self._add(nid, "Operator", shape, op=op, attrs=attrs or None)
        for slot, src in enumerate(srcs, start=1):
            src_id, src_slot = (src, 1) if isinstance(src, str) else src
            self.edges.append({"from": src_id, "from_slot": src_slot, "to": nid, "to_slot": slot})
        return nid

    def doc(self, **extra):
        d = {"name": self.name, "nodes": self.nodes, "edges": self.edges}
        if self.loss:
            d["loss_node"] = self.loss
        d.update(extra)
        return d


def running_example():
    b = Builder("running_example")
    b.input("n1", [1, 2])
    b.weight("n2", [2, 2])
    b.op("n3", "MatMul", ["n1", "n2"], [1, 2])
    b.weight("n4", [2])
    b.op("n5", "Add", ["n3", "n4"], [1, 2])
    b.op("n6", "Softmax", ["n5"], [1, 2], axis=-1)
    b.const("n7", [1, 2], [[1.0, 1.0]])
    b.op("n8", "Sub", ["n7", "n6"], [1, 2])
    b.op("n9", "Log", ["n8"], [1, 2])
    b.op("n10", "Log", ["n6"], [1, 2])
    b.input("n11", [1, 2])
    b.op("n12", "Mul", ["n11", "n10"], [1, 2])
    b.const("n13", [1, 2], [[1.0, 1.0]])
    b.op("n14", "Sub", ["n13", "n11"], [1, 2])
    b.op("n15", "Mul", ["n14", "n9"], [1, 2])
    b.op("n16", "Add", ["n12", "n15"], [1, 2])
    b.op("n17", "ReduceMean", ["n16"], [], keepdims=0)
    b.op("n18", "Neg", ["n17"], [])
    b.loss = "n18"
    cfg = {"valid_ranges": {"n11": [0.0, 1.0]}, "expected_defects": ["n10", "n9"]}
    return b.doc(), cfg


def pow_softplus():
    """Pow with a negative exponent on a Softplus that can underflow to 0."""
    b = Builder("pow_softplus")
    b.input("x", [1, 3])
    b.weight("w", [3, 2])
    b.op("h", "MatMul", ["x", "w"], [1, 2])
    b.op("sp", "Softplus", ["h"], [1, 2])
    b.const("e", [], -0.5)
    b.op("p", "Pow", ["sp", "e"], [1, 2])
    b.op("loss", "ReduceMean", ["p"], [], keepdims=0)
    b.loss = "loss"
    return b.doc(), {"expected_defects": ["p"]}


def div_scale():
    """Division by a learned scale times a nonnegative input gate."""
    b = Builder("div_scale")
    b.input("x", [1, 3])
    b.input("s", [1, 1])
    b.weight("w", [3, 2])
    b.weight("g", [1, 2])
    b.op("h", "MatMul", ["x", "w"], [1, 2])
    b.op("den", "Mul", ["s", "g"], [1, 2])
    b.op("y", "Div", ["h", "den"], [1, 2])
    b.op("sq", "Mul", ["y", "y"], [1, 2])
    b.op("loss", "ReduceMean", ["sq"], [], keepdims=0)
    b.loss = "loss"
    return b.doc(), {"valid_ranges": {"s": [0.0, 4.0]}, "expected_defects": ["y"]}


def reciprocal_gate():
    """Reciprocal of a Sigmoid gate, which saturates to 0 in float32."""
    b = Builder("reciprocal_gate")
    b.input("x", [1, 4])
    b.weight("w", [4, 1])
    b.weight("b", [1])
    b.op("h", "MatMul", ["x", "w"], [1, 1])
    b.op("hb", "Add", ["h", "b"], [1, 1])
    b.op("gate", "Sigmoid", ["hb"], [1, 1])
    b.op("r", "Reciprocal", ["gate"], [1, 1])
    b.input("t", [1, 1])
    b.op("rt", "Mul", ["r", "t"], [1, 1])
    b.op("loss", "ReduceMean", ["rt"], [], keepdims=0)
    b.loss = "loss"
    return b.doc(), {"valid_ranges": {"t": [0.0, 1.0]}, "expected_defects": ["r"]}


def sqrt_affine():
    """Square root of an affine map that may go negative."""
    b = Builder("sqrt_affine")
    b.input("x", [2, 3])
    b.weight("w", [3, 2])
    b.weight("b", [2])
    b.op("h", "MatMul", ["x", "w"], [2, 2])
    b.op("hb", "Add", ["h", "b"], [2, 2])
    b.op("r", "Sqrt", ["hb"], [2, 2])
    b.op("loss", "ReduceMean", ["r"], [], keepdims=0)
    b.loss = "loss"
    return b.doc(), {"expected_defects": ["r"]}


def exp_overflow():
    """Exp of an unbounded logit under a Poisson regression loss."""
    b = Builder("exp_overflow")
    b.input("x", [1, 3])
    b.weight("w", [3, 2])
    b.op("h", "MatMul", ["x", "w"], [1, 2])
    b.op("e", "Exp", ["h"], [1, 2])
    # Poisson regression loss: mean(exp(h) - y * h)
    b.input("y", [1, 2])
    b.op("yh", "Mul", ["y", "h"], [1, 2])
    b.op("q", "Sub", ["e", "yh"], [1, 2])
    b.op("loss", "ReduceMean", ["q"], [], keepdims=0)
    b.loss = "loss"
    return b.doc(), {"valid_ranges": {"y": [0.0, 10.0]}, "expected_defects": ["e"]}


def range_positions():
    """Range whose step is a gated weight; a zero step has no finite result."""
    b = Builder("range_positions")
    b.input("x", [1, 3])
    b.input("s", [])
    b.weight("w", [3, 4])
    b.weight("k", [])
    b.op("h", "MatMul", ["x", "w"], [1, 4])
    b.op("d", "Mul", ["s", "k"], [])
    b.const("c35", [], 3.5)
    b.op("lim", "Mul", ["d", "c35"], [])
    b.const("zero", [], 0.0)
    b.op("pos", "Range", ["zero", "lim", "d"], [4])
    b.op("y", "Add", ["h", "pos"], [1, 4])
    b.op("sq", "Mul", ["y", "y"], [1, 4])
    b.op("loss", "ReduceMean", ["sq"], [], keepdims=0)
    b.loss = "loss"
    return b.doc(), {"valid_ranges": {"s": [0.0, 2.0]}, "expected_defects": ["pos"]}


def nll_weighted():
    """Weighted NLL whose class weights arrive with the batch."""
    b = Builder("nll_weighted")
    b.input("feat", [4, 3])
    b.weight("w", [3, 3])
    b.op("logits", "MatMul", ["feat", "w"], [4, 3])
    b.op("lsm", "LogSoftmax", ["logits"], [4, 3], axis=1)
    b.input("t", [4])
    b.input("cw", [3])
    b.op("nll", "NegativeLogLikelihoodLoss", ["lsm", "t", "cw"], [], reduction="mean")
    b.loss = "nll"
    cfg = {"valid_ranges": {"t": [0.0, 2.0], "cw": [0.0, 1.0]}, "expected_defects": ["nll"]}
    return b.doc(), cfg


def loop_doubling():
    """Three doublings inside a Loop, then the log of a Sigmoid."""
    body = Builder("doubling_body")
    body.input("it", [])
    body.input("c", [])
    body.input("z", [1, 2])
    body.const("two", [], 2.0)
    body.op("z2", "Mul", ["z", "two"], [1, 2])
    body.op("c2", "Identity", ["c"], [])
    body_doc = body.doc(inputs=["it", "c", "z"], outputs=["c2", "z2"])

    b = Builder("loop_doubling")
    b.input("x", [1, 4])
    b.weight("w", [4, 2])
    b.op("h", "MatMul", ["x", "w"], [1, 2])
    b.const("trip", [], 3.0)
    b.const("cond", [], 1.0)
    b.op("loop", "Loop", ["trip", "cond", "h"], [1, 2], body=body_doc)
    b.op("sg", "Sigmoid", ["loop"], [1, 2])
    b.op("lg", "Log", ["sg"], [1, 2])
    b.input("y", [1, 2])
    b.op("ly", "Mul", ["lg", "y"], [1, 2])
    b.op("m", "ReduceMean", ["ly"], [], keepdims=0)
    b.op("loss", "Neg", ["m"], [])
    b.loss = "loss"
    return b.doc(), {"valid_ranges": {"y": [0.0, 1.0]}, "expected_defects": ["lg"]}


def reshape_dynamic():
    """Reshape to a shape assembled at run time from Shape and Gather."""
    b = Builder("reshape_dynamic")
    b.input("x", [2, 6])
    b.weight("w", [6, 6])
    b.op("h", "MatMul", ["x", "w"], [2, 6])
    b.op("shp", "Shape", ["h"], [2])
    b.const("i0", [1], [0.0])
    b.op("n", "Gather", ["shp", "i0"], [1], axis=0)
    b.const("tail", [2], [2.0, 3.0])
    b.op("target", "Concat", ["n", "tail"], [3], axis=0)
    b.op("r", "Reshape", ["h", "target"], [2, 2, 3])
    b.op("m", "ReduceMax", ["r"], [2, 2], axes=[2], keepdims=0)
    b.weight("b", [2])
    b.op("mb", "Add", ["m", "b"], [2, 2])
    b.op("q", "Sqrt", ["mb"], [2, 2])
    b.op("loss", "ReduceMean", ["q"], [], keepdims=0)
    b.loss = "loss"
    return b.doc(), {"expected_defects": ["q"]}


def conv_exp():
    """Convolution, spatial mean and an Exp rate that can overflow."""
    b = Builder("conv_exp")
    b.input("x", [1, 1, 5, 5])
    b.weight("k", [2, 1, 3, 3])
    b.weight("kb", [2])
    b.op("c", "Conv", ["x", "k", "kb"], [1, 2, 3, 3], kernel_shape=[3, 3])
    b.op("p", "ReduceMean", ["c"], [1, 2], axes=[2, 3], keepdims=0)
    b.op("e", "Exp", ["p"], [1, 2])
    b.input("y", [1, 2])
    b.op("yp", "Mul", ["y", "p"], [1, 2])
    b.op("q", "Sub", ["e", "yp"], [1, 2])
    b.op("loss", "ReduceMean", ["q"], [], keepdims=0)
    b.loss = "loss"
    return b.doc(), {"valid_ranges": {"y": [0.0, 10.0]}, "expected_defects": ["e"]}


def gemm_clean():
    """Log of Sigmoid shifted by one: never near zero, so no defect."""
    b = Builder("gemm_clean")
    b.input("x", [2, 3])
    b.weight("w", [3, 2])
    b.weight("c", [2])
    b.op("h", "Gemm", ["x", "w", "c"], [2, 2])
    b.op("sg", "Sigmoid", ["h"], [2, 2])
    b.const("one", [], 1.0)
    b.op("s1", "Add", ["sg", "one"], [2, 2])
    b.op("lg", "Log", ["s1"], [2, 2])
    b.op("loss", "ReduceMean", ["lg"], [], keepdims=0)
    b.loss = "loss"
    return b.doc(), {"expected_defects": []}


CASES = [
    running_example,
    pow_softplus,
    div_scale,
    reciprocal_gate,
    sqrt_affine,
    exp_overflow,
    range_positions,
    nll_weighted,
    loop_doubling,
    reshape_dynamic,
    conv_exp,
    gemm_clean,
]



def main():
    os.makedirs(OUT, exist_ok=True)
    for make in CASES:
        doc, cfg = make()
        with open(os.path.join(OUT, doc["name"] + ".json"), "w") as fh:
            json.dump(doc, fh, indent=1)
            fh.write("\n")
        with open(os.path.join(OUT, doc["name"] + ".config.json"), "w") as fh:
            json.dump(cfg, fh, indent=1, sort_keys=True)
            fh.write("\n")


if __name__ == "__main__":
    main()
