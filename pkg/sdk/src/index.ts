export * from "./wire.js";
export * from "./connection.js";
export * from "./runtime.js";
export { REGISTRY } from "./tasks.js";
