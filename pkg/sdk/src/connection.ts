/**
 * One framed message stream over a TCP socket.
 *
 * Sends are ordered writes of whole frames; receives come out of a FIFO
 * fed by the incremental decoder, so callers can await one message at a
 * time without touching socket events.
 */

import * as net from "node:net";

import { FrameDecoder, Message, encodeFrame } from "./wire.js";

export class ConnectionClosed extends Error {
  constructor(message?: string) {
    super(message);
    this.name = new.target.name;
  }
}

export class RecvTimeout extends Error {
  constructor(message?: string) {
    super(message);
    this.name = new.target.name;
  }
}

export function parseEndpoint(endpoint: string): { host: string; port: number } {
  const cut = endpoint.lastIndexOf(":");
  const port = Number(endpoint.slice(cut + 1));
  if (cut <= 0 || !Number.isInteger(port) || port < 0 || port > 65535) {
    throw new Error(`bad endpoint ${JSON.stringify(endpoint)}`);
  }
  return { host: endpoint.slice(0, cut), port };
}

interface Waiter {
  resolve: (msg: Message) => void;
  reject: (err: Error) => void;
  timer?: NodeJS.Timeout;
}

export class Connection {
  private readonly decoder = new FrameDecoder();
  private readonly queue: Message[] = [];
  private readonly waiters: Waiter[] = [];
  private failure: Error | null = null;

  constructor(readonly socket: net.Socket) {
    socket.on("data", (chunk: Buffer) => {
      let messages: Message[];
      try {
        messages = this.decoder.feed(chunk);
      } catch (exc) {
        this.fail(exc as Error);
        socket.destroy();
        return;
      }
      for (const msg of messages) {
        const waiter = this.waiters.shift();
        if (waiter) {
          if (waiter.timer) {
            clearTimeout(waiter.timer);
          }
          waiter.resolve(msg);
        } else {
          this.queue.push(msg);
        }
      }
    });
    socket.on("error", () => {});
    socket.on("close", () => this.fail(new ConnectionClosed("connection closed")));
  }

  private fail(err: Error): void {
    if (this.failure === null) {
      this.failure = err;
    }
    while (this.waiters.length) {
      const waiter = this.waiters.shift()!;
      if (waiter.timer) {
        clearTimeout(waiter.timer);
      }
      waiter.reject(this.failure);
    }
  }

  get closed(): boolean {
    return this.failure !== null;
  }

  send(message: Message): void {
    if (this.failure !== null) {
      throw new ConnectionClosed("send on closed connection");
    }
    this.socket.write(encodeFrame(message));
  }

  /** Next message; queued data is served even after the peer closed. */
  recv(timeoutMs?: number): Promise<Message> {
    const queued = this.queue.shift();
    if (queued !== undefined) {
      return Promise.resolve(queued);
    }
    if (this.failure !== null) {
      return Promise.reject(this.failure);
    }
    return new Promise((resolve, reject) => {
      const waiter: Waiter = { resolve, reject };
      if (timeoutMs !== undefined) {
        waiter.timer = setTimeout(() => {
          const at = this.waiters.indexOf(waiter);
          if (at >= 0) {
            this.waiters.splice(at, 1);
          }
          reject(new RecvTimeout(`no message within ${timeoutMs} ms`));
        }, timeoutMs);
      }
      this.waiters.push(waiter);
    });
  }

  /** Flush pending writes, send FIN, and resolve once the socket is gone. */
  end(graceMs = 2_000): Promise<void> {
    return new Promise((resolve) => {
      if (this.socket.destroyed) {
        resolve();
        return;
      }
      // writes drain before the FIN; the timer only covers a peer that
      // never closes its half
      const timer = setTimeout(() => this.socket.destroy(), graceMs);
      this.socket.once("close", () => {
        clearTimeout(timer);
        resolve();
      });
      this.socket.end();
    });
  }

  destroy(): void {
    this.socket.destroy();
  }
}

export function connect(endpoint: string, timeoutMs = 10_000): Promise<Connection> {
  const { host, port } = parseEndpoint(endpoint);
  return new Promise((resolve, reject) => {
    const socket = net.createConnection({ host, port });
    const timer = setTimeout(() => {
      socket.destroy();
      reject(new ConnectionClosed(`connect to ${endpoint} timed out`));
    }, timeoutMs);
    socket.once("connect", () => {
      clearTimeout(timer);
      socket.setNoDelay(true);
      resolve(new Connection(socket));
    });
    socket.once("error", (err) => {
      clearTimeout(timer);
      reject(err);
    });
  });
}
