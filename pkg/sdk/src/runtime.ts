/**
 * Child-side runtime: serve one task over the parent connection, and spawn
 * subtasks through the backend's control endpoint.
 *
 * Frame order on the parent connection is fixed: hello, status(running),
 * any log frames the body emits, then exactly one terminal return or fail
 * frame. Nothing follows the terminal frame. The process exit code is 0
 * only when a return frame was sent.
 *
 * Spawning goes the long way around on purpose: the SDK never hosts a
 * backend. It sends a spawn_request over TASKMESH_BACKEND naming a local
 * listener as parent_endpoint, and the spawned child connects back there
 * with its own hello / status / terminal sequence.
 */

import * as net from "node:net";
import { randomBytes } from "node:crypto";

import { Connection, ConnectionClosed, connect } from "./connection.js";
import {
  Doc,
  Message,
  hello,
  isDocument,
  log,
  spawnRequest,
  status,
  taskFail,
  taskReturn,
} from "./wire.js";

const TASK_ID_RE = /^[0-9a-f]{32}$/;

export function newTaskId(): string {
  return randomBytes(16).toString("hex");
}

export interface SpecDoc {
  id: string;
  name: string;
  entrypoint: string;
  inputs: Record<string, Doc>;
  parent?: string;
  placement?: string;
  workspace?: string;
}

export interface Violation {
  code: string;
  detail: string;
}

/** One {code, detail} entry per violated invariant; [] means valid. */
export function validateSpec(spec: SpecDoc): Violation[] {
  const violations: Violation[] = [];
  if (typeof spec.id !== "string" || !TASK_ID_RE.test(spec.id)) {
    violations.push({ code: "bad-id", detail: `id ${JSON.stringify(spec.id)} is not 32 lowercase hex chars` });
  }
  if (!spec.name) {
    violations.push({ code: "empty-name", detail: "name must be non-empty" });
  }
  if (!spec.entrypoint) {
    violations.push({ code: "empty-entrypoint", detail: "entrypoint must be non-empty" });
  }
  if (spec.parent !== undefined) {
    if (spec.parent === spec.id) {
      violations.push({ code: "self-parent", detail: "task cannot be its own parent" });
    } else if (typeof spec.parent !== "string" || !TASK_ID_RE.test(spec.parent)) {
      violations.push({ code: "bad-parent", detail: `parent ${JSON.stringify(spec.parent)} is not a task id` });
    }
  }
  if (spec.inputs === null || typeof spec.inputs !== "object" || Array.isArray(spec.inputs)) {
    violations.push({ code: "bad-inputs", detail: "inputs must be a map" });
  } else {
    for (const [key, value] of Object.entries(spec.inputs)) {
      if (!isDocument(value)) {
        violations.push({ code: "bad-inputs", detail: `input ${JSON.stringify(key)} is not a document value` });
      }
    }
  }
  if (spec.placement !== undefined && (typeof spec.placement !== "string" || !spec.placement)) {
    violations.push({ code: "bad-placement", detail: "placement must be a non-empty string" });
  }
  if (spec.workspace !== undefined && (typeof spec.workspace !== "string" || !spec.workspace)) {
    violations.push({ code: "bad-workspace", detail: "workspace must be a non-empty volume id" });
  }
  return violations;
}

export class SpecError extends Error {
  constructor(readonly violations: Violation[]) {
    super(violations.map((v) => `${v.code}: ${v.detail}`).join("; "));
    this.name = "SpecError";
  }
}

export class SpawnRejected extends Error {
  constructor(message?: string) {
    super(message);
    this.name = "SpawnRejected";
  }
}

export interface TaskError {
  code: string;
  message?: string;
}

/** A child ended in a fail frame; message reads "code: detail". */
export class ChildFailed extends Error {
  constructor(readonly error: TaskError) {
    super(`${error.code}: ${error.message ?? ""}`);
    this.name = "ChildFailed";
  }
}

export interface SpawnOptions {
  name?: string;
  placement?: string;
  workspace?: string;
}

export type TaskBody = (ctx: TaskContext, inputs: Record<string, Doc>) => Doc | undefined | Promise<Doc | undefined>;

export type Registry = Record<string, TaskBody>;

type Settled = { ok: true; value: Doc } | { ok: false; error: TaskError };

interface PendingChild {
  settle: (outcome: Settled) => void;
  abort: (err: Error) => void;
  done: Promise<Settled>;
}

/**
 * Handed to every task body: identity, inputs, log, and blocking spawn.
 */
export class TaskContext {
  readonly taskId: string;
  readonly inputs: Record<string, Doc>;

  private readonly parent: Connection;
  private readonly env: NodeJS.ProcessEnv;
  private readonly pending = new Map<string, PendingChild>();
  private control: Connection | null = null;
  private listener: net.Server | null = null;
  private listenerEndpoint: string | null = null;

  constructor(spec: SpecDoc, parent: Connection, env: NodeJS.ProcessEnv) {
    this.taskId = spec.id;
    this.inputs = spec.inputs ?? {};
    this.parent = parent;
    this.env = env;
  }

  log(text: string, stream: "out" | "err" = "out"): void {
    this.parent.send(log(this.taskId, stream, text));
  }

  /**
   * Run a child to completion: returns its value or throws ChildFailed.
   *
   * An invalid spec raises SpecError before anything touches the wire.
   */
  async spawn(entrypoint: string, inputs: Record<string, Doc> = {}, options: SpawnOptions = {}): Promise<Doc> {
    const spec: SpecDoc = {
      id: newTaskId(),
      name: options.name ?? entrypoint,
      entrypoint,
      inputs,
      parent: this.taskId,
    };
    if (options.placement !== undefined) {
      spec.placement = options.placement;
    }
    if (options.workspace !== undefined) {
      spec.workspace = options.workspace;
    }
    const violations = validateSpec(spec);
    if (violations.length) {
      throw new SpecError(violations);
    }

    const backendEndpoint = this.env.TASKMESH_BACKEND;
    if (!backendEndpoint) {
      throw new SpawnRejected("no backend endpoint in environment");
    }
    const parentEndpoint = await this.ensureListener();
    const child = this.registerChild(spec.id);
    try {
      if (this.control === null || this.control.closed) {
        this.control = await connect(backendEndpoint);
      }
      this.control.send(spawnRequest(spec as unknown as Doc, parentEndpoint));
      const reply = await this.control.recv(10_000);
      if (reply.type !== "spawn_ack") {
        const error = reply.error as unknown as TaskError | undefined;
        throw new SpawnRejected(error?.message || "refused");
      }
      const outcome = await child.done;
      if (!outcome.ok) {
        throw new ChildFailed(outcome.error);
      }
      return outcome.value;
    } finally {
      this.pending.delete(spec.id);
    }
  }

  private registerChild(taskId: string): PendingChild {
    let settle!: (outcome: Settled) => void;
    let abort!: (err: Error) => void;
    const done = new Promise<Settled>((resolve, reject) => {
      settle = resolve;
      abort = reject;
    });
    const entry: PendingChild = { settle, abort, done };
    this.pending.set(taskId, entry);
    return entry;
  }

  /** Lazy accept loop for children connecting back with their frames. */
  private ensureListener(): Promise<string> {
    if (this.listenerEndpoint !== null) {
      return Promise.resolve(this.listenerEndpoint);
    }
    return new Promise((resolve, reject) => {
      const server = net.createServer((socket) => {
        socket.setNoDelay(true);
        this.pumpChild(new Connection(socket));
      });
      server.on("error", reject);
      server.listen(0, "127.0.0.1", () => {
        const addr = server.address() as net.AddressInfo;
        this.listener = server;
        this.listenerEndpoint = `127.0.0.1:${addr.port}`;
        resolve(this.listenerEndpoint);
      });
    });
  }

  private pumpChild(conn: Connection): void {
    void (async () => {
      const first = await conn.recv(60_000);
      if (first.type !== "hello" || typeof first.task_id !== "string") {
        conn.destroy();
        return;
      }
      const entry = this.pending.get(first.task_id);
      if (entry === undefined) {
        conn.destroy();
        return;
      }
      try {
        for (;;) {
          const msg = await conn.recv();
          if (msg.type === "return") {
            entry.settle({ ok: true, value: msg.value as Doc });
            return;
          }
          if (msg.type === "fail") {
            entry.settle({ ok: false, error: msg.error as unknown as TaskError });
            return;
          }
          // status and log frames are advisory here; only terminals matter
        }
      } catch (exc) {
        entry.abort(exc instanceof Error ? exc : new ConnectionClosed("child connection lost"));
      }
    })().catch(() => {});
  }

  /** Close the spawn plumbing; the parent connection is the caller's. */
  async shutdown(): Promise<void> {
    if (this.control !== null) {
      await this.control.end();
      this.control = null;
    }
    if (this.listener !== null) {
      await new Promise<void>((resolve) => this.listener!.close(() => resolve()));
      this.listener = null;
    }
    for (const entry of this.pending.values()) {
      entry.abort(new ConnectionClosed("runtime shut down"));
    }
    this.pending.clear();
  }

  /** @internal test hook */
  get childListenerEndpoint(): string | null {
    return this.listenerEndpoint;
  }
}

function failText(exc: unknown): string {
  if (exc instanceof ChildFailed) {
    return exc.message;
  }
  if (exc instanceof Error) {
    return `${exc.name}: ${exc.message}`;
  }
  return String(exc);
}

/**
 * Child side: hello, status(running), body, terminal frame.
 *
 * Returns 0 iff a return frame was sent. The parent connection is the only
 * place frames go; nothing follows the terminal frame.
 */
export async function serveTask(registry: Registry, env: NodeJS.ProcessEnv): Promise<number> {
  const rawSpec = env.TASKMESH_SPEC;
  const parentEndpoint = env.TASKMESH_PARENT;
  if (!rawSpec || !parentEndpoint) {
    return 1;
  }
  let spec: SpecDoc;
  try {
    spec = JSON.parse(rawSpec) as SpecDoc;
  } catch {
    return 1;
  }
  let parent: Connection;
  try {
    parent = await connect(parentEndpoint);
  } catch {
    return 1;
  }
  const ctx = new TaskContext(spec, parent, env);
  try {
    parent.send(hello(spec.id, env.TASKMESH_TOKEN));
    parent.send(status(spec.id, "running"));
    const body = registry[spec.entrypoint];
    if (body === undefined) {
      parent.send(taskFail(spec.id, "unknown-entrypoint", spec.entrypoint));
      return 1;
    }
    let value: unknown;
    try {
      value = await body(ctx, spec.inputs ?? {});
    } catch (exc) {
      parent.send(taskFail(spec.id, "task-failed", failText(exc)));
      return 1;
    }
    if (value === undefined) {
      value = null;
    }
    if (!isDocument(value)) {
      parent.send(taskFail(spec.id, "non-encodable", `value of type ${typeof value}`));
      return 1;
    }
    parent.send(taskReturn(spec.id, value));
    return 0;
  } catch {
    return 1;
  } finally {
    await ctx.shutdown();
    await parent.end();
  }
}
