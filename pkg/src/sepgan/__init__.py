"""Separating text content from background styles with character-level adversarial learning."""
from .charset import Charset, normalize_text
from .evaluation import edit_distance, lexicon_decode, otsu_binarize, otsu_threshold
from .gan import Discriminator, Generator, content_losses, extract_char_features, style_losses
from .recognizer import Prediction, Recognizer
from .train import filter_batch, joint_step, update_beta

__version__ = "0.1.0"
