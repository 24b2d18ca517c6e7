// Page behavior against a faked gateway: rendering, the online-only
// toggle, the commit body the form builds, and verbatim error display.

import { afterEach, describe, expect, it, vi } from "vitest";

import { App } from "../src/app.js";
import type { ClientRow } from "../src/types.js";

const HEX32 = /^[0-9a-f]{32}$/;

const sleep = (ms: number) => new Promise<void>((r) => setTimeout(r, ms));

async function waitFor(cond: () => boolean, what: string): Promise<void> {
  const deadline = Date.now() + 3000;
  while (Date.now() < deadline) {
    if (cond()) return;
    await sleep(10);
  }
  throw new Error(`timed out waiting for ${what}`);
}

const ok = (payload: unknown) =>
  new Response(JSON.stringify({ ok: payload }), {
    status: 200,
    headers: { "Content-Type": "application/json" },
  });

const refuse = (status: number, code: string, msg: string) =>
  new Response(JSON.stringify({ err: { code, msg } }), { status });

interface Routed {
  filters: any[];
  commits: any[];
  cancels: string[];
}

function fakeGateway(clients: ClientRow[]): Routed {
  const routed: Routed = { filters: [], commits: [], cancels: [] };
  vi.stubGlobal("fetch", async (input: unknown, init?: RequestInit) => {
    const url = new URL(String(input));
    if (url.pathname === "/v1/query") {
      const filter = JSON.parse(url.searchParams.get("filter")!);
      routed.filters.push(filter);
      if (filter.kind === "clients") {
        const rows = filter.online_only
          ? clients.filter((c) => c.online)
          : clients;
        return ok({ rows });
      }
      return ok({ rows: [] });
    }
    if (url.pathname === "/v1/commit") {
      const body = JSON.parse(String(init?.body));
      routed.commits.push(body);
      return ok({
        payload_ids: body.payloads.map((p: any) => p.id),
        parameters_ids: body.parameters.map((p: any) => p.id),
        task_ids: body.tasks.map((t: any) => t.id),
        assignment_ids: body.assignments.map((a: any) => a.id),
        replayed: false,
      });
    }
    if (url.pathname.endsWith("/cancel")) {
      routed.cancels.push(url.pathname);
      return refuse(409, "failed-precondition", "task is already FINISHED");
    }
    throw new Error(`no route for ${url.pathname}`);
  });
  return routed;
}

const FLEET: ClientRow[] = [
  { client_id: "car-1", ts: 3, last_seen: 1000, online: true },
  { client_id: "car-2", ts: 0, last_seen: null, online: false },
];

function mountApp(): { app: App; root: HTMLElement } {
  document.body.innerHTML = '<div id="app"></div>';
  const root = document.getElementById("app")!;
  const app = new App(root);
  root.querySelector<HTMLInputElement>("[data-endpoint]")!.value =
    "http://gateway.test";
  root.querySelector<HTMLInputElement>("[data-token]")!.value = "tok";
  return { app, root };
}

let disposer: (() => void) | null = null;

afterEach(() => {
  disposer?.();
  disposer = null;
  vi.unstubAllGlobals();
});

describe("App", () => {
  it("renders the fleet with online badges from the server's rows", async () => {
    fakeGateway(FLEET);
    const { app, root } = mountApp();
    disposer = () => app.dispose();
    root.querySelector<HTMLButtonElement>("[data-connect]")!.click();
    await waitFor(
      () => root.querySelectorAll("[data-client-row]").length === 2,
      "both client rows",
    );
    const row = root.querySelector('[data-client-row="car-2"]')!;
    expect(row.querySelector(".badge")!.textContent).toBe("offline");
  });

  it("the online-only toggle requeries server-side and hides the rest", async () => {
    const routed = fakeGateway(FLEET);
    const { app, root } = mountApp();
    disposer = () => app.dispose();
    root.querySelector<HTMLButtonElement>("[data-connect]")!.click();
    await waitFor(
      () => root.querySelectorAll("[data-client-row]").length === 2,
      "initial fleet",
    );
    const toggle = root.querySelector<HTMLInputElement>("[data-online-only]")!;
    toggle.checked = true;
    toggle.dispatchEvent(new Event("change"));
    await waitFor(
      () => root.querySelectorAll("[data-client-row]").length === 1,
      "offline client hidden",
    );
    expect(root.querySelector('[data-client-row="car-1"]')).not.toBeNull();
    const last = routed.filters.filter((f) => f.kind === "clients").at(-1);
    expect(last.online_only).toBe(true);
  });

  it("submit commits one payload fanned out to the picked clients", async () => {
    const routed = fakeGateway(FLEET);
    const { app, root } = mountApp();
    disposer = () => app.dispose();
    root.querySelector<HTMLButtonElement>("[data-connect]")!.click();
    await waitFor(
      () => root.querySelectorAll("[data-client-pick] input").length === 2,
      "client pick",
    );
    root.querySelector<HTMLInputElement>("[data-name]")!.value = "demo";
    root.querySelector<HTMLTextAreaElement>("[data-body]")!.value =
      "print('hi')\n";
    root.querySelector<HTMLTextAreaElement>("[data-params]")!.value =
      '{"iterations": 2}';
    for (const pick of root.querySelectorAll<HTMLInputElement>(
      "[data-client-pick] input",
    )) {
      pick.checked = true;
    }
    root
      .querySelector<HTMLFormElement>("[data-submit-form]")!
      .dispatchEvent(new Event("submit", { bubbles: true, cancelable: true }));
    await waitFor(() => routed.commits.length === 1, "commit request");

    const body = routed.commits[0];
    expect(body.payloads).toHaveLength(1);
    expect(body.payloads[0].name).toBe("demo");
    expect(body.payloads[0].body).toBe("print('hi')\n");
    expect(body.payloads[0].id).toMatch(HEX32);
    expect(body.parameters).toHaveLength(1);
    expect(body.parameters[0].value).toEqual({ iterations: 2 });
    expect(body.tasks.map((t: any) => t.client_id)).toEqual([
      "car-1",
      "car-2",
    ]);
    for (const t of body.tasks) {
      expect(t.id).toMatch(HEX32);
      expect(t.payload_id).toBe(body.payloads[0].id);
      expect(t.parameters_id).toBe(body.parameters[0].id);
      expect(t.assignment_id).toBe(body.assignments[0].id);
    }
    expect(body.assignments[0].task_ids).toEqual(
      body.tasks.map((t: any) => t.id),
    );
  });

  it("renders server refusals verbatim, code first", async () => {
    fakeGateway(FLEET);
    const { app, root } = mountApp();
    disposer = () => app.dispose();
    root.querySelector<HTMLButtonElement>("[data-connect]")!.click();
    await waitFor(
      () => root.querySelectorAll("[data-client-row]").length === 2,
      "fleet",
    );
    await app.cancel("c".repeat(32));
    const banner = root.querySelector<HTMLElement>("[data-error]")!;
    expect(banner.hidden).toBe(false);
    expect(banner.textContent).toBe(
      "failed-precondition: task is already FINISHED",
    );
  });
});
