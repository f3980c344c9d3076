from bytestack.data.corpus import ByteCorpus, ByteSample, WindowSampler, eval_batches, load_corpus, sample_window

__all__ = ["ByteCorpus", "ByteSample", "WindowSampler", "eval_batches", "load_corpus", "sample_window"]
