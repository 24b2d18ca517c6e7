// Server-sent events over fetch.  The browser's EventSource cannot send
// an Authorization header, so the stream endpoint is read by hand: one
// ``data:`` line per bus frame, blank-line separated, comment lines as
// keepalives.  The reader reconnects until closed and reports every
// successful (re)connect so the owner can query-fill whatever a gap
// swallowed.

export interface StreamHandle {
  close(): void;
}

export interface StreamCallbacks {
  onFrame(frame: unknown): void;
  /** Fired after every successful connect, including the first. */
  onConnect?(): void;
  onError?(err: unknown): void;
}

const sleep = (ms: number) => new Promise<void>((r) => setTimeout(r, ms));

export function openStream(
  url: string,
  token: string,
  cb: StreamCallbacks,
  retryMs = 1000,
): StreamHandle {
  let closed = false;
  let controller: AbortController | null = null;

  function dispatch(block: string): void {
    const data = block
      .split("\n")
      .filter((line) => line.startsWith("data:"))
      .map((line) => line.slice("data:".length).replace(/^ /, ""))
      .join("\n");
    if (!data) return; // keepalive comment
    let frame: unknown;
    try {
      frame = JSON.parse(data);
    } catch {
      return; // the gateway only ever sends JSON frames
    }
    cb.onFrame(frame);
  }

  async function runOnce(): Promise<void> {
    controller = new AbortController();
    const res = await fetch(url, {
      headers: { Authorization: `Bearer ${token}`, Accept: "text/event-stream" },
      signal: controller.signal,
    });
    if (!res.ok || !res.body) {
      throw new Error(`stream rejected: HTTP ${res.status}`);
    }
    cb.onConnect?.();
    const reader = res.body.getReader();
    const decoder = new TextDecoder();
    let buf = "";
    for (;;) {
      const { done, value } = await reader.read();
      if (done) break;
      buf += decoder.decode(value, { stream: true });
      let cut;
      while ((cut = buf.indexOf("\n\n")) >= 0) {
        dispatch(buf.slice(0, cut));
        buf = buf.slice(cut + 2);
      }
    }
    throw new Error("stream ended");
  }

  void (async () => {
    while (!closed) {
      try {
        await runOnce();
      } catch (err) {
        if (closed) return;
        cb.onError?.(err);
        await sleep(retryMs);
      }
    }
  })();

  return {
    close() {
      closed = true;
      controller?.abort();
    },
  };
}
