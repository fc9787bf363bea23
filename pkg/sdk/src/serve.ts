#!/usr/bin/env node
/**
 * Process entrypoint for a spawned task instance.
 *
 * The backend provides everything through the environment: TASKMESH_SPEC,
 * TASKMESH_PARENT, and optionally TASKMESH_BACKEND / TASKMESH_TOKEN.
 */

import { serveTask } from "./runtime.js";
import { REGISTRY } from "./tasks.js";

const code = await serveTask(REGISTRY, process.env);
process.exitCode = code;
// all sockets are closed by now; the timer is a backstop against any stray
// handle keeping the loop alive
setTimeout(() => process.exit(code), 5_000).unref();
