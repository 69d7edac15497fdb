"""Independent scalar reference for the operator dictionary.

Hand-written straight-line transcriptions, kept deliberately separate from
symreward.symtree so that each side checks the other. Also holds a tiny
interpreter for the unrolled pseudocode, used to audit export fidelity.
"""

import numpy as np


def ref_add(a, b):
    return float(a + b)


def ref_subtract(a, b):
    return float(a - b)


def ref_multiply(a, b):
    return float(a * b)


def ref_cos(a):
    return float(np.cos(a))


def ref_sin(a):
    return float(np.sin(a))


def ref_tan(a):
    return float(np.tan(a))


def ref_max(*args):
    x = np.float64(args[0])
    for y in args[1:]:
        x = np.maximum(x, np.float64(y))
    return float(x)


def ref_min(*args):
    x = np.float64(args[0])
    for y in args[1:]:
        x = np.minimum(x, np.float64(y))
    return float(x)


def ref_pass_greater(left, right):
    if left > right:
        return float(left)
    return float(right)


def ref_pass_smaller(left, right):
    if left < right:
        return float(left)
    return float(right)


def ref_equal_to(left, right):
    if left == right:
        return 1.0
    return 0.0


def ref_gate(left, right, condition):
    if condition <= 0:
        return float(left)
    return float(right)


def ref_square(a):
    return float(a * a)


def ref_is_negative(a):
    if a < 0:
        return 1.0
    return 0.0


def ref_div_by_100(a):
    return float(a / 100.0)


def ref_div_by_10(a):
    return float(a / 10.0)


def ref_protected_div(left, right):
    with np.errstate(divide="ignore", invalid="ignore"):
        x = np.divide(left, right)
    if np.isinf(x):
        x = 1.0
    if np.isnan(x):
        x = 1.0
    return float(x)


# tag -> (callable, arity); None marks the variadic extrema (2 to 5 args).
REFERENCE = {
    "add": (ref_add, 2),
    "subtract": (ref_subtract, 2),
    "multiply": (ref_multiply, 2),
    "cos": (ref_cos, 1),
    "sin": (ref_sin, 1),
    "tan": (ref_tan, 1),
    "max": (ref_max, None),
    "min": (ref_min, None),
    "pass_greater": (ref_pass_greater, 2),
    "pass_smaller": (ref_pass_smaller, 2),
    "equal_to": (ref_equal_to, 2),
    "gate": (ref_gate, 3),
    "square": (ref_square, 1),
    "is_negative": (ref_is_negative, 1),
    "div_by_100": (ref_div_by_100, 1),
    "div_by_10": (ref_div_by_10, 1),
    "protected_div": (ref_protected_div, 2),
}

TRANSCENDENTAL = {"cos", "sin", "tan"}


def bits(x):
    """Raw IEEE double bits, for bit-exact comparisons (distinguishes -0.0, NaN)."""
    return np.float64(x).tobytes()


def same_bits(a, b):
    return bits(a) == bits(b)


def same_bits_or_both_nan(a, b):
    """Bit-exact equality, except any two NaNs match regardless of payload."""
    return bits(a) == bits(b) or (np.isnan(a) and np.isnan(b))


def within_one_ulp(a, b):
    a = float(a)
    b = float(b)
    if np.isnan(a) and np.isnan(b):
        return True
    if a == b:
        return True
    return b == np.nextafter(a, b)


def parse_pseudocode(text):
    """Parse unrolled pseudocode into (target, tag, args) instructions.

    tag is None for a bare copy line such as `reward = v3`. Parsing once and
    executing many times keeps large export audits fast.
    """
    program = []
    for line in text.splitlines():
        lhs, rhs = line.split(" = ", 1)
        rhs = rhs.strip()
        if "(" not in rhs:
            program.append((lhs, None, [rhs]))
            continue
        tag, inner = rhs.split("(", 1)
        if not inner.endswith(")"):
            raise ValueError(f"malformed call {rhs!r}")
        args = [a.strip() for a in inner[:-1].split(",")]
        fn, arity = REFERENCE[tag]
        if arity is not None and len(args) != arity:
            raise ValueError(f"{tag} expects {arity} args, got {len(args)}")
        program.append((lhs, tag, args))
    if not program or program[-1][0] != "reward":
        raise ValueError("pseudocode must end with a reward line")
    return program


def run_program(program, feature_values):
    env = dict(feature_values)
    for lhs, tag, args in program:
        vals = [env[a] if a in env else float(a) for a in args]
        env[lhs] = vals[0] if tag is None else REFERENCE[tag][0](*vals)
    return env["reward"]


def run_pseudocode(text, feature_values):
    """Execute unrolled pseudocode against the reference ops."""
    return run_program(parse_pseudocode(text), feature_values)
