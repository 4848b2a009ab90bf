"""Instrumentation for checking which modules a computation touches."""
from contextlib import contextmanager


@contextmanager
def record_module_calls(modules):
    """Record forward calls of every submodule of each named module.

    Yields a dict mapping each name to the number of forward calls observed
    anywhere inside that module while the context is active.
    """
    counts = {name: 0 for name in modules}
    handles = []
    for name, mod in modules.items():
        for sub in mod.modules():
            def hook(_m, _inp, _out, _name=name):
                counts[_name] += 1
            handles.append(sub.register_forward_hook(hook))
    try:
        yield counts
    finally:
        for h in handles:
            h.remove()
