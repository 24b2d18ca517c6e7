// Release gate for the dashboard, run against a real local deployment:
// one stack process, one agent, real payload containers.  Each
// criterion prints a [PASS]/[FAIL] line.

import { spawn, type ChildProcess } from "node:child_process";
import { mkdtempSync, readFileSync } from "node:fs";
import { tmpdir } from "node:os";
import { join } from "node:path";
import { afterAll, afterEach, beforeAll, describe, expect, it } from "vitest";

import { App } from "../src/app.js";

const sleep = (ms: number) => new Promise<void>((r) => setTimeout(r, ms));

async function waitFor(
  cond: () => boolean,
  what: string,
  timeoutMs = 30_000,
): Promise<void> {
  const deadline = Date.now() + timeoutMs;
  while (Date.now() < deadline) {
    if (cond()) return;
    await sleep(25);
  }
  throw new Error(`timed out waiting for ${what}`);
}

async function withCriterion(
  name: string,
  body: () => Promise<void>,
): Promise<void> {
  try {
    await body();
  } catch (err) {
    console.log(`[FAIL] ${name}: ${String(err)}`);
    throw err;
  }
  console.log(`[PASS] ${name}`);
}

// -- the deployment ---------------------------------------------------------

let stack: ChildProcess;
let gatewayUrl = "";
let userToken = "";

beforeAll(async () => {
  const root = join(mkdtempSync(join(tmpdir(), "dash-")), "stack");
  stack = spawn(
    "spada-stack",
    ["--data", root, "--agents", "1", "--ephemeral"],
    { env: { ...process.env, PYTHONUNBUFFERED: "1" }, stdio: ["ignore", "pipe", "ignore"] },
  );
  let out = "";
  stack.stdout!.on("data", (chunk) => {
    out += String(chunk);
  });
  await waitFor(() => out.includes("ready"), "stack ready");
  const http = out.split("\n").find((line) => line.startsWith("http:"));
  gatewayUrl = http!.replace("http:", "").trim();
  userToken = JSON.parse(readFileSync(join(root, "user.json"), "utf-8")).token;
});

afterAll(async () => {
  stack.kill("SIGTERM");
  await new Promise<void>((r) => {
    stack.once("exit", () => r());
    setTimeout(() => {
      stack.kill("SIGKILL");
      r();
    }, 10_000);
  });
});

async function query(filter: unknown): Promise<any[]> {
  const encoded = encodeURIComponent(JSON.stringify(filter));
  const res = await fetch(`${gatewayUrl}/v1/query?filter=${encoded}`, {
    headers: { Authorization: `Bearer ${userToken}` },
  });
  const body = await res.json();
  if ("err" in body) throw new Error(JSON.stringify(body.err));
  return body.ok.rows;
}

// -- the page ---------------------------------------------------------------

let app: App | null = null;

function mountConnected(): HTMLElement {
  document.body.innerHTML = '<div id="app"></div>';
  const root = document.getElementById("app")!;
  app = new App(root);
  root.querySelector<HTMLInputElement>("[data-endpoint]")!.value = gatewayUrl;
  root.querySelector<HTMLInputElement>("[data-token]")!.value = userToken;
  root.querySelector<HTMLButtonElement>("[data-connect]")!.click();
  return root;
}

afterEach(() => {
  app?.dispose();
  app = null;
});

async function submitPayload(root: HTMLElement, name: string, body: string) {
  await waitFor(
    () => root.querySelector('[data-client-pick] input[value="dev-0"]') !== null,
    "agent in the client pick",
  );
  root.querySelector<HTMLInputElement>("[data-name]")!.value = name;
  root.querySelector<HTMLTextAreaElement>("[data-body]")!.value = body;
  root.querySelector<HTMLInputElement>(
    '[data-client-pick] input[value="dev-0"]',
  )!.checked = true;
  root
    .querySelector<HTMLFormElement>("[data-submit-form]")!
    .dispatchEvent(new Event("submit", { bubbles: true, cancelable: true }));
}

const chipText = (root: HTMLElement) =>
  root.querySelector("[data-chip]")?.textContent ?? "";

describe("dashboard against a live deployment", () => {
  it("shows the whole submit-to-finished loop live", async () => {
    const root = mountConnected();
    await withCriterion(
      "submit renders ACTIVE, a result lands in the feed, status flips to FINISHED",
      async () => {
        // Holds ACTIVE for an observable moment before its one result.
        await submitPayload(
          root,
          "quick",
          [
            "import time",
            "import spada_payload as sp",
            "time.sleep(0.5)",
            'sp.publish({"n": 1})',
            "",
          ].join("\n"),
        );
        await waitFor(() => chipText(root) === "ACTIVE", "ACTIVE chip");
        await waitFor(
          () => root.querySelectorAll("[data-feed-row]").length === 1,
          "result in the feed",
        );
        await waitFor(() => chipText(root) === "FINISHED", "FINISHED chip");
      },
    );

    // After quiescence the rendered rows must equal the server's count.
    const taskId = root
      .querySelector<HTMLElement>("[data-task]")!
      .dataset.task!;
    const [task] = await query({ kind: "tasks", task_id: taskId });
    expect(root.querySelectorAll("[data-feed-row]").length).toBe(
      task.result_count,
    );
  });

  it("cancel of an indefinite task renders CANCELED within two seconds", async () => {
    const root = mountConnected();
    await submitPayload(
      root,
      "forever",
      [
        "import time",
        "import spada_payload as sp",
        'sp.publish({"n": 1})',
        "time.sleep(600)",
        "",
      ].join("\n"),
    );
    await waitFor(() => chipText(root) === "ACTIVE", "ACTIVE chip");
    await waitFor(
      () => root.querySelectorAll("[data-feed-row]").length === 1,
      "the task is really running",
    );
    await withCriterion("cancel renders CANCELED within 2s", async () => {
      root.querySelector<HTMLButtonElement>("[data-cancel]")!.click();
      await waitFor(() => chipText(root) === "CANCELED", "CANCELED chip", 2000);
    });

    // A second cancel is refused; the refusal renders verbatim.
    const taskId = root
      .querySelector<HTMLElement>("[data-task]")!
      .dataset.task!;
    await app!.cancel(taskId);
    const banner = root.querySelector<HTMLElement>("[data-error]")!;
    expect(banner.hidden).toBe(false);
    expect(banner.textContent).toBe(
      "failed-precondition: task is already CANCELED",
    );
  });
});
