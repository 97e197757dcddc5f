/** Audio playback with seamless A/B switching.
 *
 * Toggling between clips keeps the playback position, so assessors compare
 * the same instant of the two stimuli. HTMLAudioElement satisfies AudioClip
 * structurally; tests inject mocks.
 */

import type { ClipKey } from './types.js';

export interface AudioClip {
  currentTime: number;
  play(): void | Promise<void>;
  pause(): void;
}

export class ClipGroup {
  private active: ClipKey | null = null;

  constructor(private readonly clips: Record<ClipKey, AudioClip>) {}

  get activeClip(): ClipKey | null {
    return this.active;
  }

  /** Start (or switch to) a clip, carrying over the playback position. */
  play(key: ClipKey): void {
    const target = this.clips[key];
    if (this.active !== null && this.active !== key) {
      const current = this.clips[this.active];
      target.currentTime = current.currentTime;
      current.pause();
    }
    void target.play();
    this.active = key;
  }

  pause(): void {
    if (this.active !== null) {
      this.clips[this.active].pause();
    }
  }

  stop(): void {
    for (const key of Object.keys(this.clips) as ClipKey[]) {
      this.clips[key].pause();
      this.clips[key].currentTime = 0;
    }
    this.active = null;
  }
}
