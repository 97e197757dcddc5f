/** Session controller: linear plan of blinded comparisons plus progress.
 *
 * Assessors see instructions, then one comparison at a time, then a
 * completion screen. Model identities and live standings are never fetched
 * or displayed.
 */

import { ListenApi } from './api.js';
import { ClipGroup, type AudioClip } from './audio.js';
import { ComparisonView, type Clock } from './comparison.js';
import type { SessionInfo } from './types.js';

export type ClipFactory = (url: string) => AudioClip;

export interface Progress {
  completed: number;
  required: number;
}

export class SessionController {
  private session: SessionInfo | null = null;
  private state: Progress = { completed: 0, required: 0 };

  constructor(
    private readonly api: ListenApi,
    private readonly clipFactory: ClipFactory,
    private readonly clock: Clock = () => Date.now(),
  ) {}

  get progress(): Progress {
    return { ...this.state };
  }

  async start(assessor: string, category: string, equipment = ''): Promise<Progress> {
    this.session = await this.api.createSession(assessor, category, equipment);
    this.state = { completed: this.session.completed, required: this.session.required };
    return this.progress;
  }

  /** Fetch the next comparison; null once the plan is exhausted. */
  async next(): Promise<ComparisonView | null> {
    if (this.session === null) throw new Error('session not started');
    const payload = await this.api.nextComparison(this.session.session_id);
    if (payload === null) return null;
    this.state = { completed: payload.completed, required: payload.required };
    const clips = new ClipGroup({
      reference: this.clipFactory(this.api.audioUrl(payload.reference)),
      a: this.clipFactory(this.api.audioUrl(payload.a)),
      b: this.clipFactory(this.api.audioUrl(payload.b)),
    });
    return new ComparisonView(payload, clips, this.clock);
  }

  /**
   * Submit the assessor's choice. Duplicate responses (a retry landing after
   * a previously recorded attempt) advance progress without double-counting.
   */
  async submit(view: ComparisonView, choice: 'a' | 'b'): Promise<Progress> {
    const outcome = await this.api.submitResult(view.choose(choice));
    if (outcome === 'duplicate' || outcome.completed === null) {
      this.state = { ...this.state, completed: this.state.completed + 1 };
    } else {
      this.state = { completed: outcome.completed, required: outcome.required ?? this.state.required };
    }
    return this.progress;
  }

  get complete(): boolean {
    return this.state.required > 0 && this.state.completed >= this.state.required;
  }
}
