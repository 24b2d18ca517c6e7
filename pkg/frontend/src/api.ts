import type {
  AssignmentWire,
  CancelResponse,
  ClientRow,
  CommitResponse,
  ResultWire,
  TaskWire,
} from "./types.js";

/** A refusal from the server, carrying its error code verbatim. */
export class ApiError extends Error {
  constructor(
    readonly code: string,
    readonly msg: string,
  ) {
    super(`${code}: ${msg}`);
    this.name = "ApiError";
  }
}

/** Mint a fresh 128-bit document id as 32 lowercase hex characters. */
export function mintId(): string {
  const raw = new Uint8Array(16);
  crypto.getRandomValues(raw);
  return [...raw].map((b) => b.toString(16).padStart(2, "0")).join("");
}

export interface Connection {
  base: string; // e.g. http://127.0.0.1:7422
  token: string;
}

export function assignmentTopic(assignmentId: string): string {
  return `assignments/${assignmentId}/events`;
}

export interface SubmitSpec {
  name: string;
  body: string;
  parameters?: unknown;
  clients: string[];
}

async function call(
  conn: Connection,
  method: "GET" | "POST",
  path: string,
  body?: unknown,
): Promise<any> {
  let res: Response;
  try {
    res = await fetch(conn.base + path, {
      method,
      headers: {
        Authorization: `Bearer ${conn.token}`,
        ...(body === undefined ? {} : { "Content-Type": "application/json" }),
      },
      body: body === undefined ? undefined : JSON.stringify(body),
    });
  } catch (err) {
    throw new ApiError("unavailable", `gateway unreachable: ${String(err)}`);
  }
  const reply = await res.json().catch(() => null);
  if (reply && typeof reply === "object" && "err" in reply) {
    const e = (reply as { err: { code?: unknown; msg?: unknown } }).err;
    throw new ApiError(String(e.code ?? "unknown"), String(e.msg ?? ""));
  }
  if (!res.ok || !reply || typeof reply !== "object") {
    throw new ApiError("unavailable", `unexpected reply (HTTP ${res.status})`);
  }
  return (reply as { ok: unknown }).ok;
}

export class Gateway {
  constructor(readonly conn: Connection) {}

  query(filter: Record<string, unknown>): Promise<any[]> {
    const encoded = encodeURIComponent(JSON.stringify(filter));
    return call(this.conn, "GET", `/v1/query?filter=${encoded}`).then(
      (ok) => ok.rows as any[],
    );
  }

  clients(onlineOnly: boolean): Promise<ClientRow[]> {
    return this.query({ kind: "clients", online_only: onlineOnly });
  }

  assignments(): Promise<AssignmentWire[]> {
    return this.query({ kind: "assignments" });
  }

  tasks(assignmentId: string): Promise<TaskWire[]> {
    return this.query({ kind: "tasks", assignment_id: assignmentId });
  }

  results(taskId: string): Promise<ResultWire[]> {
    return this.query({ kind: "results", task_id: taskId });
  }

  cancel(taskId: string): Promise<CancelResponse> {
    return call(
      this.conn,
      "POST",
      `/v1/tasks/${encodeURIComponent(taskId)}/cancel`,
    );
  }

  /** Commit one payload fanned out as a task per selected client. */
  submit(spec: SubmitSpec): Promise<CommitResponse> {
    const payloadId = mintId();
    const parametersId = spec.parameters === undefined ? null : mintId();
    const assignmentId = mintId();
    const taskIds = spec.clients.map(() => mintId());
    return call(this.conn, "POST", "/v1/commit", {
      payloads: [{ id: payloadId, name: spec.name, body: spec.body }],
      parameters:
        parametersId === null
          ? []
          : [{ id: parametersId, value: spec.parameters }],
      tasks: spec.clients.map((clientId, i) => ({
        id: taskIds[i],
        assignment_id: assignmentId,
        client_id: clientId,
        payload_id: payloadId,
        parameters_id: parametersId,
      })),
      assignments: [
        { id: assignmentId, name: spec.name, task_ids: taskIds },
      ],
    });
  }

  streamUrl(topics: string[]): string {
    const qs = topics
      .map((t) => `topic=${encodeURIComponent(t)}`)
      .join("&");
    return `${this.conn.base}/v1/stream?${qs}`;
  }
}
