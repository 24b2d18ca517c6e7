"""Reusable payload sources for tests.

Payloads talk to the task API directly over the socket named in
SPADA_TASK_API, one JSON object per line, so these sources embed a
minimal client prelude instead of importing anything beyond the
standard library.
"""

from __future__ import annotations

import textwrap

API_PRELUDE = textwrap.dedent(
    '''
    import json, os, socket, sys

    _sock = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
    _sock.connect(os.environ["SPADA_TASK_API"])
    _rfile = _sock.makefile("rb")
    _next_id = 0

    class ApiError(Exception):
        def __init__(self, code, msg):
            super().__init__(f"{code}: {msg}")
            self.code = code

    def call(method, **params):
        global _next_id
        _next_id += 1
        req = {"id": _next_id, "method": method, "params": params}
        _sock.sendall(json.dumps(req).encode() + b"\\n")
        resp = json.loads(_rfile.readline())
        if "err" in resp:
            raise ApiError(resp["err"]["code"], resp["err"]["msg"])
        return resp["ok"]
    '''
)


def with_prelude(body: str) -> str:
    return API_PRELUDE + "\n" + textwrap.dedent(body)


# Publishes each value in a literal list, then exits cleanly.
def publisher(values) -> str:
    return with_prelude(
        f"""
        for v in {values!r}:
            call("publish", value=v)
        """
    )


# The running-mean shape: read a count from parameters, consume that
# many fresh signal readings, publish the running mean each time.
MEAN_OVER_SIGNAL = with_prelude(
    """
    params = call("get_parameters")["value"]
    count = int(params["iterations"])
    name = params["signal"]
    total = 0.0
    seen = 0
    for _ in range(count):
        reading = call("next_signal", name=name, timeout_ms=30000)
        total += float(reading["value"])
        seen += 1
        call("publish", value={"Mean": total / seen, "n_values": seen})
    """
)

# Ignores SIGTERM and naps; used to exercise the grace/force-kill path.
STUBBORN_SLEEPER = textwrap.dedent(
    """
    import signal, time
    signal.signal(signal.SIGTERM, signal.SIG_IGN)
    time.sleep(600)
    """
)

# Exits promptly and cleanly on SIGTERM.
POLITE_SLEEPER = textwrap.dedent(
    """
    import signal, sys, time
    signal.signal(signal.SIGTERM, lambda *a: sys.exit(0))
    time.sleep(600)
    """
)

# Counts runs across restarts using intermediate state.
RESUMABLE_COUNTER = with_prelude(
    """
    import base64
    blob = call("get_state")["blob_b64"]
    n = int(base64.b64decode(blob)) if blob else 0
    call("publish", value={"run": n})
    call("put_state", blob_b64=base64.b64encode(str(n + 1).encode()).decode())
    """
)
