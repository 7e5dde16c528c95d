/**
 * Copyright 2026 The bertopt Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 * http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */
#ifndef BERTOPT_ERRORS_HPP_
#define BERTOPT_ERRORS_HPP_

#include <stdexcept>
#include <string>

namespace bertopt {

class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

#define BERTOPT_DEFINE_ERROR(name)                              \
  class name : public Error {                                   \
   public:                                                      \
    explicit name(const std::string& msg) : Error(#name ": " + msg) {} \
  }

BERTOPT_DEFINE_ERROR(ShapeMismatch);
BERTOPT_DEFINE_ERROR(DtypeMismatch);
BERTOPT_DEFINE_ERROR(OverflowDetected);
BERTOPT_DEFINE_ERROR(UnknownOpKind);
BERTOPT_DEFINE_ERROR(InvalidConfig);
BERTOPT_DEFINE_ERROR(NonFiniteGradient);
BERTOPT_DEFINE_ERROR(CorpusTooSmall);
BERTOPT_DEFINE_ERROR(IoFailure);
BERTOPT_DEFINE_ERROR(CorruptShard);
BERTOPT_DEFINE_ERROR(PeerDisconnected);
BERTOPT_DEFINE_ERROR(LengthMismatch);
BERTOPT_DEFINE_ERROR(BucketLayoutMismatch);
BERTOPT_DEFINE_ERROR(ProtocolError);
BERTOPT_DEFINE_ERROR(WatchdogTimeout);

#undef BERTOPT_DEFINE_ERROR

}  // namespace bertopt

#endif  // BERTOPT_ERRORS_HPP_
