// Wire shapes, exactly as the server emits them.  Nothing in here is
// invented client-side; renames or extra fields would silently decouple
// the dashboard from what the platform actually stores.

export type TaskStatus = "ACTIVE" | "FINISHED" | "ERROR" | "CANCELED";

export interface ClientRow {
  client_id: string;
  ts: number;
  last_seen: number | null;
  online: boolean;
}

export interface TaskWire {
  id: string;
  assignment_id: string;
  client_id: string;
  payload_id: string;
  parameters_id: string | null;
  status: TaskStatus;
  result_count: number;
  error_log: string;
  created_at: number;
  terminal_at: number | null;
}

export interface AssignmentWire {
  id: string;
  name: string;
  task_ids: string[];
  created_at: number;
}

export interface ResultWire {
  task_id: string;
  seq: number;
  value: unknown;
  produced_at: number;
  recorded_at: number;
}

export type StreamEvent =
  | { kind: "result"; task_id: string; seq: number; value: unknown }
  | { kind: "status"; task_id: string; status: TaskStatus };

// Bus frames as forwarded by the stream endpoint: event topics carry an
// ``event``, retained clock topics carry a ``ts``.
export interface StreamFrame {
  topic: string;
  event?: StreamEvent;
  ts?: number;
}

export interface CommitResponse {
  payload_ids: string[];
  parameters_ids: string[];
  task_ids: string[];
  assignment_ids: string[];
  replayed: boolean;
}

export interface CancelResponse {
  task_id: string;
  status: TaskStatus;
}
