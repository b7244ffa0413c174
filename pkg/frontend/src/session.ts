// WebSocket session: drives a ConsoleModel from the broker's /ws endpoint.
// The socket constructor is injectable so node tests can use the "ws"
// package while the browser uses the native implementation.

import { ConsoleModel } from "./model.js";
import {
  ControlBody,
  Envelope,
  decodeEnvelope,
  encodeEnvelope,
} from "./protocol.js";

export interface SocketLike {
  send(data: string): void;
  close(): void;
  onopen: ((ev?: unknown) => void) | null;
  onmessage: ((ev: { data: unknown }) => void) | null;
  onclose: ((ev?: unknown) => void) | null;
  onerror: ((ev?: unknown) => void) | null;
}

export type SocketFactory = (url: string) => SocketLike;

export interface SessionOptions {
  socketFactory?: SocketFactory;
  timeoutMs?: number;
  onChange?: () => void;
}

const defaultFactory: SocketFactory = (url) =>
  new (globalThis as { WebSocket: new (url: string) => SocketLike }).WebSocket(url);

export class ConsoleSession {
  readonly model = new ConsoleModel();
  private socket: SocketLike | null = null;
  private group = 0;
  private readonly factory: SocketFactory;
  private readonly timeoutMs: number;
  private readonly onChange: () => void;

  constructor(options: SessionOptions = {}) {
    this.factory = options.socketFactory ?? defaultFactory;
    this.timeoutMs = options.timeoutMs ?? 5000;
    this.onChange = options.onChange ?? (() => undefined);
  }

  join(host: string, port: number, userId: number, group: number, name: string): Promise<void> {
    const model = this.model;
    model.userId = userId;
    model.status = "connecting";
    model.banner = "";
    this.group = group;
    this.onChange();

    return new Promise((resolve, reject) => {
      let settled = false;
      const fail = (message: string) => {
        if (!settled) {
          settled = true;
          model.status = "error";
          model.banner = message;
          this.onChange();
          reject(new Error(message));
        }
      };
      const timer = setTimeout(() => fail("connection timed out"), this.timeoutMs);

      let socket: SocketLike;
      try {
        socket = this.factory(`ws://${host}:${port}/ws`);
      } catch (err) {
        clearTimeout(timer);
        fail(String(err));
        return;
      }
      this.socket = socket;

      socket.onopen = () => {
        socket.send(
          encodeEnvelope({
            kind: "JOIN",
            origin: userId,
            group,
            seq: 0,
            body: { name },
          }),
        );
      };
      socket.onmessage = (ev) => {
        const text = typeof ev.data === "string" ? ev.data : String(ev.data);
        let env: Envelope;
        try {
          env = decodeEnvelope(text);
        } catch {
          return; // not ours to crash on; the broker validates its side
        }
        if (!settled) {
          if (env.kind === "JOIN_ACK") {
            settled = true;
            clearTimeout(timer);
            model.adoptAck(env);
            this.onChange();
            resolve();
            return;
          }
          if (env.kind === "ERROR") {
            clearTimeout(timer);
            model.applyEnvelope(env);
            fail(model.banner);
            return;
          }
        }
        if (model.applyEnvelope(env)) {
          this.onChange();
        }
      };
      socket.onclose = () => {
        if (!settled) {
          clearTimeout(timer);
          fail("connection refused or closed");
          return;
        }
        if (model.status === "joined") {
          model.status = "closed";
          model.banner = "disconnected";
          this.onChange();
        }
      };
      socket.onerror = () => {
        /* onclose carries the outcome */
      };
    });
  }

  get joined(): boolean {
    return this.model.status === "joined" && this.socket !== null;
  }

  private sendEnvelope(kind: "CONTROL" | "CHAT", body: Envelope["body"]): void {
    if (!this.joined || !this.socket) {
      throw new Error("not connected");
    }
    this.socket.send(
      encodeEnvelope({
        kind,
        origin: this.model.userId,
        group: this.group,
        seq: 0,
        body,
      }),
    );
  }

  turnDial(ordinal: number): void {
    const body: ControlBody = { instrument: 0, code: "SET_DIAL", value: ordinal };
    this.model.optimistic(body);
    this.sendEnvelope("CONTROL", body);
    this.onChange();
  }

  setPower(on: boolean): void {
    const body: ControlBody = { instrument: 0, code: "SET_POWER", value: on ? 1 : 0 };
    this.model.optimistic(body);
    this.sendEnvelope("CONTROL", body);
    this.onChange();
  }

  sendChat(text: string): void {
    this.sendEnvelope("CHAT", { text });
  }

  close(): void {
    if (this.socket) {
      this.socket.close();
      this.socket = null;
    }
  }
}
