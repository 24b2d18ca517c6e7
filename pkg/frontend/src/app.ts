import { ApiError, Gateway, assignmentTopic, type Connection } from "./api.js";
import { AssignmentFeed } from "./feed.js";
import { openStream, type StreamHandle } from "./sse.js";
import type {
  AssignmentWire,
  ClientRow,
  StreamFrame,
  TaskWire,
} from "./types.js";

// Liveness decays silently (a client going quiet emits no event), so
// the fleet pane re-queries on a short period; everything else on the
// page moves only when the server says so.
const FLEET_REFRESH_MS = 5000;

const TEMPLATE = `
  <header class="bar">
    <input data-endpoint type="text" placeholder="gateway, e.g. http://127.0.0.1:7422" size="34" />
    <input data-token type="password" placeholder="user token" size="26" />
    <button data-connect>Connect</button>
    <span data-error class="error" hidden></span>
  </header>
  <main class="columns">
    <section class="pane">
      <h2>Clients</h2>
      <label class="toggle">
        <input data-online-only type="checkbox" /> online only
      </label>
      <table class="clients">
        <tbody data-clients></tbody>
      </table>
      <h2>Assignments</h2>
      <ul data-assignments class="assignments"></ul>
      <h2>Submit</h2>
      <form data-submit-form class="submit">
        <input data-name type="text" placeholder="assignment name" value="job" />
        <textarea data-body rows="8" placeholder="payload source" spellcheck="false"></textarea>
        <textarea data-params rows="3" placeholder="parameters JSON (optional)" spellcheck="false"></textarea>
        <div data-client-pick class="pick"></div>
        <button data-submit type="submit">Submit</button>
      </form>
    </section>
    <section class="pane detail">
      <h2 data-detail-title>No assignment open</h2>
      <span data-stream-state class="stream-state"></span>
      <div data-chips class="chips"></div>
      <h3>Feed</h3>
      <ul data-feed class="feed"></ul>
    </section>
  </main>
`;

function esc(text: unknown): string {
  return String(text).replace(
    /[&<>"']/g,
    (c) =>
      ({ "&": "&amp;", "<": "&lt;", ">": "&gt;", '"': "&quot;", "'": "&#39;" })[
        c
      ]!,
  );
}

const short = (id: string) => id.slice(0, 8);

export class App {
  private gateway: Gateway | null = null;
  private stream: StreamHandle | null = null;
  private feed: AssignmentFeed | null = null;
  private open: AssignmentWire | null = null;
  private fleetTimer: ReturnType<typeof setInterval> | null = null;

  private refs: {
    endpoint: HTMLInputElement;
    token: HTMLInputElement;
    connect: HTMLButtonElement;
    error: HTMLElement;
    onlineOnly: HTMLInputElement;
    clients: HTMLElement;
    assignments: HTMLElement;
    form: HTMLFormElement;
    name: HTMLInputElement;
    body: HTMLTextAreaElement;
    params: HTMLTextAreaElement;
    clientPick: HTMLElement;
    detailTitle: HTMLElement;
    streamState: HTMLElement;
    chips: HTMLElement;
    feedList: HTMLElement;
  };

  constructor(private root: HTMLElement) {
    root.innerHTML = TEMPLATE;
    const q = <T extends Element>(sel: string) => {
      const el = root.querySelector<T>(sel);
      if (!el) throw new Error(`template is missing ${sel}`);
      return el;
    };
    this.refs = {
      endpoint: q("[data-endpoint]"),
      token: q("[data-token]"),
      connect: q("[data-connect]"),
      error: q("[data-error]"),
      onlineOnly: q("[data-online-only]"),
      clients: q("[data-clients]"),
      assignments: q("[data-assignments]"),
      form: q("[data-submit-form]"),
      name: q("[data-name]"),
      body: q("[data-body]"),
      params: q("[data-params]"),
      clientPick: q("[data-client-pick]"),
      detailTitle: q("[data-detail-title]"),
      streamState: q("[data-stream-state]"),
      chips: q("[data-chips]"),
      feedList: q("[data-feed]"),
    };
    this.bind();
  }

  // -- wiring ---------------------------------------------------------------

  private bind(): void {
    this.refs.connect.addEventListener("click", () => {
      void this.connect();
    });
    this.refs.onlineOnly.addEventListener("change", () => {
      void this.refreshFleet();
    });
    this.refs.form.addEventListener("submit", (ev) => {
      ev.preventDefault();
      void this.submit();
    });
    this.refs.assignments.addEventListener("click", (ev) => {
      const li = (ev.target as Element).closest<HTMLElement>("[data-open]");
      if (li) void this.openAssignment(li.dataset.open!);
    });
    this.refs.chips.addEventListener("click", (ev) => {
      const btn = (ev.target as Element).closest<HTMLElement>("[data-cancel]");
      if (btn) void this.cancel(btn.dataset.cancel!);
    });
  }

  async connect(): Promise<void> {
    const conn: Connection = {
      base: this.refs.endpoint.value.trim().replace(/\/$/, ""),
      token: this.refs.token.value.trim(),
    };
    this.gateway = new Gateway(conn);
    if (this.fleetTimer !== null) clearInterval(this.fleetTimer);
    this.fleetTimer = setInterval(() => {
      void this.refreshFleet();
    }, FLEET_REFRESH_MS);
    await this.guard(async () => {
      await this.refreshFleet();
      await this.refreshAssignments();
    });
  }

  dispose(): void {
    if (this.fleetTimer !== null) clearInterval(this.fleetTimer);
    this.stream?.close();
  }

  // -- error surface --------------------------------------------------------

  private showError(err: unknown): void {
    // Server refusals render verbatim, code and all.
    const text =
      err instanceof ApiError ? `${err.code}: ${err.msg}` : String(err);
    this.refs.error.textContent = text;
    this.refs.error.hidden = false;
  }

  private async guard<T>(body: () => Promise<T>): Promise<T | undefined> {
    try {
      const out = await body();
      this.refs.error.hidden = true;
      return out;
    } catch (err) {
      this.showError(err);
      return undefined;
    }
  }

  // -- fleet ----------------------------------------------------------------

  async refreshFleet(): Promise<void> {
    if (!this.gateway) return;
    const rows = await this.gateway.clients(this.refs.onlineOnly.checked);
    this.renderClients(rows);
    this.renderClientPick(rows);
  }

  private renderClients(rows: ClientRow[]): void {
    this.refs.clients.innerHTML = rows
      .map(
        (r) => `
        <tr data-client-row="${esc(r.client_id)}">
          <td>${esc(r.client_id)}</td>
          <td><span class="badge ${r.online ? "online" : "offline"}">${
            r.online ? "online" : "offline"
          }</span></td>
          <td class="dim">${
            r.last_seen === null
              ? "never"
              : new Date(r.last_seen).toLocaleTimeString()
          }</td>
        </tr>`,
      )
      .join("");
  }

  private renderClientPick(rows: ClientRow[]): void {
    const picked = new Set(
      [...this.refs.clientPick.querySelectorAll<HTMLInputElement>("input")]
        .filter((el) => el.checked)
        .map((el) => el.value),
    );
    this.refs.clientPick.innerHTML = rows
      .map(
        (r) => `
        <label><input type="checkbox" value="${esc(r.client_id)}" ${
          picked.has(r.client_id) ? "checked" : ""
        } /> ${esc(r.client_id)}</label>`,
      )
      .join("");
  }

  // -- assignments ----------------------------------------------------------

  async refreshAssignments(): Promise<void> {
    if (!this.gateway) return;
    const rows = await this.gateway.assignments();
    this.refs.assignments.innerHTML = rows
      .map(
        (a) => `
        <li>
          <button data-open="${esc(a.id)}" class="${
            this.open?.id === a.id ? "current" : ""
          }">${esc(a.name)} <span class="dim">${esc(short(a.id))} · ${
            a.task_ids.length
          } task${a.task_ids.length === 1 ? "" : "s"}</span></button>
        </li>`,
      )
      .join("");
  }

  async openAssignment(assignmentId: string): Promise<void> {
    if (!this.gateway) return;
    const gateway = this.gateway;
    this.stream?.close();
    const rows = await this.guard(() =>
      gateway.query({ kind: "assignments", assignment_id: assignmentId }),
    );
    if (!rows || rows.length === 0) return;
    this.open = rows[0] as AssignmentWire;
    this.feed = new AssignmentFeed();
    this.renderDetail();
    void this.refreshAssignments();
    const feed = this.feed;
    this.stream = openStream(
      gateway.streamUrl([assignmentTopic(assignmentId)]),
      gateway.conn.token,
      {
        onConnect: () => {
          this.refs.streamState.textContent = "live";
          void this.backfill(gateway, assignmentId, feed);
        },
        onFrame: (frame) => {
          const ev = (frame as StreamFrame).event;
          if (ev && this.feed === feed) {
            feed.applyEvent(ev);
            this.renderDetail();
          }
        },
        onError: () => {
          this.refs.streamState.textContent = "reconnecting";
        },
      },
    );
  }

  /** Fetch what the stream cannot replay: rows from before subscribe
      and anything a disconnect swallowed. */
  private async backfill(
    gateway: Gateway,
    assignmentId: string,
    feed: AssignmentFeed,
  ): Promise<void> {
    await this.guard(async () => {
      const tasks = await gateway.tasks(assignmentId);
      if (this.feed !== feed) return;
      feed.applyTasks(tasks);
      for (const t of tasks) {
        const results = await gateway.results(t.id);
        if (this.feed !== feed) return;
        feed.applyResults(results);
      }
      this.renderDetail();
    });
  }

  private renderDetail(): void {
    if (!this.open || !this.feed) {
      this.refs.detailTitle.textContent = "No assignment open";
      this.refs.chips.innerHTML = "";
      this.refs.feedList.innerHTML = "";
      return;
    }
    this.refs.detailTitle.textContent = `${this.open.name} (${short(this.open.id)})`;
    const tasks = [...this.feed.tasks.values()].sort((a, b) =>
      a.client_id.localeCompare(b.client_id),
    );
    this.refs.chips.innerHTML = tasks.map((t) => this.chipHtml(t)).join("");
    this.refs.feedList.innerHTML = this.feed.rows
      .map((row) => {
        const client = this.feed!.tasks.get(row.task_id)?.client_id ?? "?";
        return `<li data-feed-row="${esc(row.task_id)}/${row.seq}">
          <span class="dim">${esc(client)} #${row.seq}</span>
          <code>${esc(JSON.stringify(row.value))}</code>
        </li>`;
      })
      .join("");
    this.refs.feedList.scrollTop = this.refs.feedList.scrollHeight;
  }

  private chipHtml(t: TaskWire): string {
    const errorLine =
      t.status === "ERROR" && t.error_log
        ? `<div class="dim error-line">${esc(t.error_log.split("\n")[0])}</div>`
        : "";
    return `
      <div class="task" data-task="${esc(t.id)}">
        <span>${esc(t.client_id)}</span>
        <span data-chip class="chip ${t.status.toLowerCase()}">${t.status}</span>
        <span class="dim" data-count>${this.feed!.countFor(t.id)} results</span>
        ${
          t.status === "ACTIVE"
            ? `<button data-cancel="${esc(t.id)}">Cancel</button>`
            : ""
        }
        ${errorLine}
      </div>`;
  }

  // -- actions --------------------------------------------------------------

  async submit(): Promise<void> {
    if (!this.gateway) {
      this.showError(new Error("connect first"));
      return;
    }
    const gateway = this.gateway;
    const clients = [
      ...this.refs.clientPick.querySelectorAll<HTMLInputElement>("input"),
    ]
      .filter((el) => el.checked)
      .map((el) => el.value);
    const paramsText = this.refs.params.value.trim();
    let parameters: unknown;
    if (paramsText) {
      try {
        parameters = JSON.parse(paramsText);
      } catch (err) {
        this.showError(new Error(`parameters are not valid JSON: ${String(err)}`));
        return;
      }
    }
    const out = await this.guard(() =>
      gateway.submit({
        name: this.refs.name.value.trim() || "job",
        body: this.refs.body.value,
        parameters,
        clients,
      }),
    );
    if (!out) return;
    await this.refreshAssignments();
    await this.openAssignment(out.assignment_ids[0]!);
  }

  async cancel(taskId: string): Promise<void> {
    if (!this.gateway) return;
    const gateway = this.gateway;
    // No local status flip: the chip changes when the server's own
    // event comes back over the stream.
    await this.guard(() => gateway.cancel(taskId));
  }
}

export function mount(root: HTMLElement): App {
  return new App(root);
}
