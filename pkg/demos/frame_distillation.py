"""Teach the frame-distilling agent to keep the informative half of each clip.

Half the frames of every clip carry only jitter.  Recall is the fraction of
the five retained frames that are informative; 0.5 is chance.
"""

from relforge import tasks


def main(rounds=6, per_round=1000, seed=0):
    recipe = tasks.FD_RECIPE
    data = tasks.load_task(tasks.FRAMES, seed)
    system = tasks.make_system(recipe, seed)
    tasks.train_srg_stage(system, data, recipe, seed)
    print(f"before training: recall {tasks.fd_recall(system, data, 100):.3f}")
    for k in range(rounds):
        tasks.train_fd_stage(system, data, recipe, seed=seed * 100 + k, episodes=per_round)
        print(f"{(k + 1) * per_round:5d} episodes: recall {tasks.fd_recall(system, data, 100):.3f}")

    clip = data.test_clips[0]
    mask = system.fd_mask(data.test_singles[0], None)
    print("informative frames", sorted(clip.informative_frames))
    print("kept frames       ", [int(t) for t in mask.nonzero()[0]])


if __name__ == "__main__":
    main()
