/** Built-in task bodies mirroring the Python registry's small fixtures. */

import { ChildFailed, Registry, TaskContext } from "./runtime.js";
import { Doc } from "./wire.js";

function num(inputs: Record<string, Doc>, key: string): number {
  const value = inputs[key];
  if (typeof value !== "number") {
    throw new TypeError(`input ${JSON.stringify(key)} must be a number`);
  }
  return value;
}

export function add(_ctx: TaskContext, inputs: Record<string, Doc>): number {
  return num(inputs, "a") + num(inputs, "b");
}

export function echo(_ctx: TaskContext, inputs: Record<string, Doc>): Doc {
  return inputs;
}

export function boom(_ctx: TaskContext, inputs: Record<string, Doc>): never {
  const message = typeof inputs.message === "string" ? inputs.message : "kaboom";
  throw new Error(message);
}

export function logLines(ctx: TaskContext, inputs: Record<string, Doc>): number {
  const lines = Array.isArray(inputs.lines) ? inputs.lines : [];
  const stream = inputs.stream === "err" ? "err" : "out";
  for (const line of lines) {
    ctx.log(String(line), stream);
  }
  return lines.length;
}

/** Spawn one add child and return its sum; exercises the spawn client. */
export async function spawnAdd(ctx: TaskContext, inputs: Record<string, Doc>): Promise<Doc> {
  return ctx.spawn("add", { a: inputs.a ?? null, b: inputs.b ?? null });
}

/** Spawn a failing child; the ChildFailed surfaces as this task's failure. */
export async function spawnBoom(ctx: TaskContext, inputs: Record<string, Doc>): Promise<Doc> {
  try {
    return await ctx.spawn("boom", typeof inputs.message === "string" ? { message: inputs.message } : {});
  } catch (exc) {
    if (exc instanceof ChildFailed && inputs.swallow === true) {
      return { caught: exc.error.code };
    }
    throw exc;
  }
}

export const REGISTRY: Registry = {
  add,
  echo,
  boom,
  log_lines: logLines,
  spawn_add: spawnAdd,
  spawn_boom: spawnBoom,
};
