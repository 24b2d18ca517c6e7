// State behind one open assignment view.  Every row shown is a row the
// server sent: live events append in arrival order, query backfill
// fills whatever a disconnect swallowed, and (task, seq) dedup keeps
// redeliveries from rendering twice.

import type { ResultWire, StreamEvent, TaskStatus, TaskWire } from "./types.js";

export interface FeedRow {
  task_id: string;
  seq: number;
  value: unknown;
}

export class AssignmentFeed {
  readonly tasks = new Map<string, TaskWire>();
  readonly rows: FeedRow[] = [];
  private seen = new Set<string>();
  // Status events that raced ahead of the first task query.
  private pending: { task_id: string; status: TaskStatus }[] = [];

  applyTasks(rows: TaskWire[]): void {
    for (const t of rows) this.tasks.set(t.id, t);
    const still: typeof this.pending = [];
    for (const ev of this.pending) {
      const t = this.tasks.get(ev.task_id);
      if (t) t.status = ev.status;
      else still.push(ev);
    }
    this.pending = still;
  }

  applyResults(rows: ResultWire[]): void {
    for (const r of rows) {
      this.push({ task_id: r.task_id, seq: r.seq, value: r.value });
    }
  }

  applyEvent(ev: StreamEvent): void {
    if (ev.kind === "result") {
      this.push({ task_id: ev.task_id, seq: ev.seq, value: ev.value });
      return;
    }
    const t = this.tasks.get(ev.task_id);
    if (t) t.status = ev.status;
    else this.pending.push({ task_id: ev.task_id, status: ev.status });
  }

  countFor(taskId: string): number {
    let n = 0;
    for (const r of this.rows) if (r.task_id === taskId) n += 1;
    return n;
  }

  private push(row: FeedRow): void {
    const key = `${row.task_id}/${row.seq}`;
    if (this.seen.has(key)) return;
    this.seen.add(key);
    this.rows.push(row);
  }
}
